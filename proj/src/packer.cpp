#include "bayesq/packer.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstdlib>
#include <json.hpp>

#include "bayesq/error.hpp"
#include "file_io.hpp"

namespace bayesq {

using json = nlohmann::ordered_json;

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

std::int64_t lane_padding(std::int64_t bits, std::int64_t lane) {
  if (lane <= 1) return 0;
  return (lane - bits % lane) % lane;
}

std::int64_t ceil_log2(std::int64_t k) {
  if (k <= 1) return 0;
  return std::bit_width(static_cast<std::uint64_t>(k - 1));
}

std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_real(const json& j) {
  const auto s = j.get<std::string>();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError("bad real '" + s + "' in packed manifest");
  return v;
}

json ledger_json(const CostLedger& l) {
  return {{"payload", l.payload}, {"scales", l.scales},   {"codebook", l.codebook}, {"indices", l.indices},
          {"headers", l.headers}, {"padding", l.padding}, {"total", l.total()}};
}

}  // namespace

void CostModel::validate() const {
  if (scale_bits < 0 || zero_point_bits < 0 || code_bits < 0 || header_bits < 0)
    throw InvalidArgument("cost model: negative bit width");
  if (group_size < 1 || lane_bits < 1 || vq_group < 1) throw InvalidArgument("cost model: group/lane sizes must be >= 1");
}

int index_bits(int m, Designer designer, const CostModel& cm) {
  if (designer == Designer::None) return 32;
  if (designer == Designer::LloydVector) return static_cast<int>(m * cm.vq_group);
  return m;
}

CostLedger vq_cost(std::int64_t n, std::int64_t g, std::int64_t levels, const CostModel& cm) {
  CostLedger l;
  l.indices = ceil_div(n, g) * ceil_log2(levels);
  l.codebook = levels * g * cm.code_bits;
  l.headers = cm.header_bits;
  l.padding = lane_padding(l.indices, cm.lane_bits);
  return l;
}

CostLedger block_cost(std::int64_t n, int m, Designer designer, const CostModel& cm) {
  cm.validate();
  if (n < 1) throw InvalidArgument("block_cost: block must hold at least one weight");
  if (designer == Designer::LloydVector) {
    if (m < 1 || m * cm.vq_group > 30) throw InvalidArgument("block_cost: vector index width out of range");
    return vq_cost(n, cm.vq_group, std::int64_t{1} << (m * cm.vq_group), cm);
  }
  CostLedger l;
  if (designer == Designer::None) {
    l.payload = 32 * n;
  } else {
    if (m < 1 || m > 30) throw InvalidArgument("block_cost: bit-width out of range");
    l.payload = n * m;
    l.scales = ceil_div(n, cm.group_size) * (cm.scale_bits + cm.zero_point_bits);
    if (designer == Designer::LloydScalar) l.codebook = (std::int64_t{1} << m) * cm.code_bits;
  }
  l.headers = cm.header_bits;
  l.padding = lane_padding(l.payload, cm.lane_bits);
  return l;
}

double average_bits(const std::vector<CostLedger>& ledgers, std::int64_t total_weights) {
  if (total_weights <= 0) throw InvalidArgument("average_bits: weight count must be > 0");
  std::int64_t total = 0;
  for (const auto& l : ledgers) total += l.total();
  return static_cast<double>(total) / static_cast<double>(total_weights);
}

std::vector<std::uint8_t> pack_indices(const std::vector<std::int64_t>& indices, int bits) {
  if (bits < 1 || bits > 32) throw InvalidArgument("pack_indices: bit width must lie in [1, 32]");
  const auto limit = std::int64_t{1} << bits;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(ceil_div(static_cast<std::int64_t>(indices.size()) * bits, 8)), 0);
  std::size_t pos = 0;
  for (const auto q : indices) {
    if (q < 0 || q >= limit) throw InvalidArgument("pack_indices: index " + std::to_string(q) + " out of range");
    const auto v = static_cast<std::uint64_t>(q);
    for (int b = 0; b < bits; ++b, ++pos)
      if ((v >> b) & 1u) out[pos >> 3] |= static_cast<std::uint8_t>(1u << (pos & 7));
  }
  return out;
}

std::vector<std::int64_t> unpack_indices(const std::vector<std::uint8_t>& bytes, std::size_t count, int bits) {
  if (bits < 1 || bits > 32) throw InvalidArgument("unpack_indices: bit width must lie in [1, 32]");
  if (bytes.size() * 8 < count * static_cast<std::size_t>(bits)) throw FormatError("unpack_indices: stream too short");
  std::vector<std::int64_t> out(count);
  std::size_t pos = 0;
  for (auto& q : out) {
    std::uint64_t v = 0;
    for (int b = 0; b < bits; ++b, ++pos) v |= static_cast<std::uint64_t>((bytes[pos >> 3] >> (pos & 7)) & 1u) << b;
    q = static_cast<std::int64_t>(v);
  }
  return out;
}

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

std::int64_t PackedBlock::size() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::vector<std::int64_t> PackedBlock::indices() const {
  if (designer == Designer::None) throw InvalidArgument("block '" + id + "' is stored unquantized");
  return unpack_indices(stream, static_cast<std::size_t>(index_count),
                        designer == Designer::LloydVector ? bits * static_cast<int>(vq_group) : bits);
}

Eigen::VectorXd PackedBlock::dequantize() const {
  const auto n = size();
  if (designer == Designer::None) {
    Eigen::VectorXd w(n);
    for (std::int64_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(stream[static_cast<std::size_t>(4 * i + k)]) << (8 * k);
      w[i] = std::bit_cast<float>(u);
    }
    return w;
  }
  return bayesq::dequantize(groups, indices(), n, group_size, vq_group);
}

std::int64_t PackedModel::total_bits() const {
  std::int64_t t = 0;
  for (const auto& b : blocks) t += b.ledger.total();
  return t;
}

std::int64_t PackedModel::total_weights() const {
  std::int64_t t = 0;
  for (const auto& b : blocks) t += b.size();
  return t;
}

double PackedModel::average_bits() const {
  const auto n = total_weights();
  return n > 0 ? static_cast<double>(total_bits()) / static_cast<double>(n) : 0.0;
}

const PackedBlock& PackedModel::block(const std::string& id) const {
  for (const auto& b : blocks)
    if (b.id == id) return b;
  throw InvalidArgument("packed model has no block '" + id + "'");
}

PackedBlock pack_block(const WeightBlock& block, int m, Designer designer, const Codebook* cb,
                       const Whitener* whitener, const CostModel& cm, ExportMode mode) {
  PackedBlock p;
  p.id = block.id;
  p.shape = block.shape;
  p.kind = block.kind;
  p.designer = designer;
  p.group_size = block.group_size;
  if (designer == Designer::None) {
    p.bits = 32;
    p.index_count = block.size();
    p.stream.reserve(static_cast<std::size_t>(4 * block.size()));
    for (Eigen::Index i = 0; i < block.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(block.values[i]);
      for (int k = 0; k < 4; ++k) p.stream.push_back(static_cast<std::uint8_t>((u >> (8 * k)) & 0xFFu));
    }
  } else {
    if (!cb || !whitener) throw InvalidArgument("pack_block: block '" + block.id + "' needs a codebook and whitener");
    if (codebook_bits(*cb) != m) throw InvalidArgument("pack_block: codebook bit-width differs from allocation");
    p.bits = m;
    const auto q = quantize_block(block, *whitener, *cb);
    if (const auto* l = std::get_if<LloydCodebook>(cb); l && l->group() > 1) {
      if (designer != Designer::LloydVector || l->group() != cm.vq_group)
        throw InvalidArgument("pack_block: vector codebook does not match the cost model");
      p.vq_group = l->group();
    }
    p.groups = compile_to_affine(*cb, q.indices, block.values.cast<double>(), *whitener, block.group_size, mode);
    p.index_count = static_cast<std::int64_t>(q.indices.size());
    p.stream = pack_indices(q.indices, index_bits(m, designer, cm));
  }
  p.ledger = block_cost(block, p.bits, designer, cm);
  p.crc = crc32_of(p.stream);
  return p;
}

void export_packed(const PackedModel& model, const std::filesystem::path& path) {
  const auto stem = strip_suffix(path, ".qmanifest");
  json j;
  j["format_version"] = 1;
  j["endianness"] = "little";
  j["bit_order"] = "lsb-first";
  const auto& c = model.cost;
  j["cost_model"] = {{"scale_bits", c.scale_bits}, {"zero_point_bits", c.zero_point_bits},
                     {"code_bits", c.code_bits},   {"header_bits", c.header_bits},
                     {"group_size", c.group_size}, {"lane_bits", c.lane_bits},
                     {"vq_group", c.vq_group}};
  j["total_bits"] = model.total_bits();
  j["total_weights"] = model.total_weights();
  j["average_bits"] = full_precision(model.average_bits());
  j["blocks"] = json::array();
  std::string blob;
  for (const auto& b : model.blocks) {
    json jb;
    jb["id"] = b.id;
    jb["shape"] = b.shape;
    jb["kind"] = to_string(b.kind);
    jb["bits"] = b.bits;
    jb["designer"] = to_string(b.designer);
    jb["group_size"] = b.group_size;
    jb["vq_group"] = b.vq_group;
    jb["index_count"] = b.index_count;
    jb["offset"] = blob.size();
    jb["length"] = b.stream.size();
    jb["crc32"] = b.crc;
    jb["ledger"] = ledger_json(b.ledger);
    json groups = json::array();
    for (const auto& g : b.groups) {
      json jg = {{"scale", full_precision(g.scale)},
                 {"zero_point", full_precision(g.zero_point)},
                 {"qmin", g.qmin},
                 {"qmax", g.qmax}};
      if (g.has_lut()) {
        jg["lut_width"] = g.lut_width;
        json lut = json::array();
        for (double v : g.lut) lut.push_back(full_precision(v));
        jg["lut"] = std::move(lut);
      }
      groups.push_back(std::move(jg));
    }
    jb["groups"] = std::move(groups);
    j["blocks"].push_back(std::move(jb));
    blob.append(reinterpret_cast<const char*>(b.stream.data()), b.stream.size());
  }
  detail::write_file(with_suffix(stem, ".qmanifest"), j.dump(2) + "\n");
  detail::write_file(with_suffix(stem, ".qblob"), blob);
}

PackedModel import_packed(const std::filesystem::path& path) {
  const auto stem = strip_suffix(path, ".qmanifest");
  json j;
  try {
    j = json::parse(detail::read_file(with_suffix(stem, ".qmanifest")));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed packed manifest at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  const auto blob = detail::read_file(with_suffix(stem, ".qblob"));
  PackedModel model;
  try {
    if (j.at("format_version").get<int>() != 1) throw FormatError("unsupported packed format_version");
    const auto& jc = j.at("cost_model");
    auto& c = model.cost;
    c.scale_bits = jc.at("scale_bits");
    c.zero_point_bits = jc.at("zero_point_bits");
    c.code_bits = jc.at("code_bits");
    c.header_bits = jc.at("header_bits");
    c.group_size = jc.at("group_size");
    c.lane_bits = jc.at("lane_bits");
    c.vq_group = jc.at("vq_group");
    for (const auto& jb : j.at("blocks")) {
      PackedBlock b;
      b.id = jb.at("id").get<std::string>();
      b.shape = jb.at("shape").get<std::vector<std::int64_t>>();
      b.kind = block_kind_from_string(jb.at("kind").get<std::string>());
      b.bits = jb.at("bits");
      b.designer = designer_from_string(jb.at("designer").get<std::string>());
      b.group_size = jb.at("group_size");
      b.vq_group = jb.at("vq_group");
      b.index_count = jb.at("index_count");
      const std::int64_t offset = jb.at("offset"), length = jb.at("length");
      if (offset < 0 || length < 0 || offset + length > static_cast<std::int64_t>(blob.size()))
        throw FormatError("block '" + b.id + "': packed stream [" + std::to_string(offset) + ", " +
                          std::to_string(offset + length) + ") exceeds blob of " + std::to_string(blob.size()) +
                          " bytes");
      b.stream.assign(blob.begin() + offset, blob.begin() + offset + length);
      b.crc = jb.at("crc32");
      const auto& jl = jb.at("ledger");
      b.ledger = {jl.at("payload"), jl.at("scales"), jl.at("codebook"), jl.at("indices"), jl.at("headers"),
                  jl.at("padding")};
      if (b.ledger.total() != jl.at("total").get<std::int64_t>())
        throw VerificationError("block '" + b.id + "': ledger items do not sum to the recorded total");
      for (const auto& jg : jb.at("groups")) {
        CompiledAffine g;
        g.scale = parse_real(jg.at("scale"));
        g.zero_point = parse_real(jg.at("zero_point"));
        g.qmin = jg.at("qmin");
        g.qmax = jg.at("qmax");
        if (jg.contains("lut")) {
          g.lut_width = jg.at("lut_width");
          for (const auto& v : jg.at("lut")) g.lut.push_back(parse_real(v));
        }
        b.groups.push_back(std::move(g));
      }
      if (crc32_of(b.stream) != b.crc) throw VerificationError("block '" + b.id + "': checksum mismatch");
      CostModel bc = model.cost;
      bc.group_size = b.group_size;
      if (b.designer == Designer::LloydVector) bc.vq_group = b.vq_group;
      if (block_cost(b.size(), b.bits, b.designer, bc) != b.ledger)
        throw VerificationError("block '" + b.id + "': ledger does not match recomputed cost");
      const std::int64_t width = b.designer == Designer::None ? 32 : index_bits(b.bits, b.designer, bc);
      if (length != ceil_div(b.index_count * width, 8))
        throw VerificationError("block '" + b.id + "': stream length does not match index count");
      model.blocks.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed packed manifest: ") + e.what());
  }
  if (model.total_bits() != j.at("total_bits").get<std::int64_t>())
    throw VerificationError("packed model: total bits do not match the block ledgers");
  return model;
}

}  // namespace bayesq
