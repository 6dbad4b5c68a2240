#include "bayesq/model_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bayesq/error.hpp"
#include "file_io.hpp"

namespace bayesq {

using detail::read_file;
using detail::write_file;
using json = nlohmann::ordered_json;

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::DenseMatrix:
      return "dense-matrix";
    case BlockKind::ConvFilter:
      return "conv-filter";
    case BlockKind::GenericVector:
      return "generic-vector";
  }
  return "generic-vector";
}

BlockKind block_kind_from_string(const std::string& s) {
  if (s == "dense-matrix") return BlockKind::DenseMatrix;
  if (s == "conv-filter") return BlockKind::ConvFilter;
  if (s == "generic-vector") return BlockKind::GenericVector;
  throw InvalidArgument("unknown block kind '" + s + "'");
}

std::int64_t WeightBlock::channels() const {
  if (kind == BlockKind::GenericVector || shape.empty()) return 1;
  return shape.front();
}

std::int64_t WeightBlock::channel_size() const {
  return static_cast<std::int64_t>(values.size()) / channels();
}

void WeightBlock::validate() const {
  if (values.size() < 1) throw InvalidArgument("block '" + id + "': empty values");
  if (shape.empty()) throw InvalidArgument("block '" + id + "': empty shape");
  std::int64_t prod = 1;
  for (auto s : shape) {
    if (s < 1) throw InvalidArgument("block '" + id + "': non-positive shape entry");
    prod *= s;
  }
  if (prod != values.size())
    throw InvalidArgument("block '" + id + "': shape product " + std::to_string(prod) +
                          " != value count " + std::to_string(values.size()));
  if (group_size < 1) throw InvalidArgument("block '" + id + "': group_size < 1");
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]))
      throw InvalidArgument("block '" + id + "': non-finite value at index " + std::to_string(i));
  }
  if (kind == BlockKind::DenseMatrix && shape.size() != 2)
    throw InvalidArgument("block '" + id + "': dense-matrix needs a 2-axis shape");
}

const WeightBlock& Model::block(const std::string& id) const {
  for (const auto& b : blocks)
    if (b.id == id) return b;
  throw InvalidArgument("no block with id '" + id + "'");
}

std::int64_t Model::total_weights() const {
  std::int64_t n = 0;
  for (const auto& b : blocks) n += b.values.size();
  return n;
}

ModelManifest make_manifest(const std::vector<WeightBlock>& blocks, std::vector<NetLayerSpec> net) {
  ModelManifest m;
  std::int64_t offset = 0;
  for (const auto& b : blocks) {
    BlockDescriptor d;
    d.id = b.id;
    d.shape = b.shape;
    d.kind = b.kind;
    d.group_size = b.group_size;
    d.offset = offset;
    d.length = 4 * static_cast<std::int64_t>(b.values.size());
    offset += d.length;
    m.blocks.push_back(std::move(d));
  }
  m.net = std::move(net);
  return m;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& ext) {
  return std::filesystem::path(stem.string() + ext);
}

std::filesystem::path strip_suffix(const std::filesystem::path& path, const std::string& ext) {
  const auto s = path.string();
  if (s.size() > ext.size() && s.compare(s.size() - ext.size(), ext.size(), ext) == 0)
    return std::filesystem::path(s.substr(0, s.size() - ext.size()));
  return path;
}

namespace {

void put_f32_le(std::string& out, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xFFu));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(p[k]) << (8 * k);
  return std::bit_cast<float>(u);
}

json manifest_to_json(const ModelManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["endianness"] = m.endianness;
  j["blocks"] = json::array();
  for (const auto& d : m.blocks) {
    j["blocks"].push_back({{"id", d.id},
                           {"shape", d.shape},
                           {"kind", to_string(d.kind)},
                           {"group_size", d.group_size},
                           {"offset", d.offset},
                           {"length", d.length}});
  }
  if (!m.net.empty()) {
    json layers = json::array();
    for (const auto& l : m.net)
      layers.push_back({{"weight", l.weight}, {"bias", l.bias}, {"activation", l.activation}});
    j["net"] = {{"layers", layers}};
  }
  return j;
}

ModelManifest manifest_from_json(const json& j) {
  ModelManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.endianness = j.at("endianness").get<std::string>();
    for (const auto& jb : j.at("blocks")) {
      BlockDescriptor d;
      d.id = jb.at("id").get<std::string>();
      d.shape = jb.at("shape").get<std::vector<std::int64_t>>();
      d.kind = block_kind_from_string(jb.at("kind").get<std::string>());
      d.group_size = jb.value("group_size", std::int64_t{64});
      d.offset = jb.at("offset").get<std::int64_t>();
      d.length = jb.at("length").get<std::int64_t>();
      m.blocks.push_back(std::move(d));
    }
    if (j.contains("net")) {
      for (const auto& jl : j.at("net").at("layers")) {
        NetLayerSpec l;
        l.weight = jl.at("weight").get<std::string>();
        l.bias = jl.value("bias", std::string{});
        l.activation = jl.value("activation", std::string{"identity"});
        m.net.push_back(std::move(l));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  if (m.format_version != 1)
    throw FormatError("unsupported format_version " + std::to_string(m.format_version));
  if (m.endianness != "little") throw FormatError("unsupported endianness '" + m.endianness + "'");
  return m;
}

}  // namespace

Model load_model(const std::filesystem::path& path) {
  const auto stem = strip_suffix(path, ".manifest");
  const auto text = read_file(with_suffix(stem, ".manifest"));
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed manifest " + stem.string() + ".manifest at byte " +
                      std::to_string(e.byte) + ": " + e.what());
  }
  Model model;
  model.manifest = manifest_from_json(j);
  const auto blob = read_file(with_suffix(stem, ".blob"));
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const auto blob_size = static_cast<std::int64_t>(blob.size());

  std::set<std::string> seen;
  for (const auto& d : model.manifest.blocks) {
    if (!seen.insert(d.id).second)
      throw FormatError("duplicate block id '" + d.id + "' (manifest offset " +
                        std::to_string(d.offset) + ")");
    std::int64_t n = 1;
    for (auto s : d.shape) {
      if (s < 1) throw FormatError("block '" + d.id + "': non-positive shape entry");
      n *= s;
    }
    if (d.length != 4 * n)
      throw FormatError("block '" + d.id + "': length " + std::to_string(d.length) +
                        " bytes does not match " + std::to_string(n) + " weights");
    if (d.offset < 0 || d.offset + d.length > blob_size)
      throw FormatError("block '" + d.id + "': truncated blob, needs bytes [" +
                        std::to_string(d.offset) + ", " + std::to_string(d.offset + d.length) +
                        ") but blob has " + std::to_string(blob_size));
    WeightBlock b;
    b.id = d.id;
    b.shape = d.shape;
    b.kind = d.kind;
    b.group_size = d.group_size;
    b.values.resize(n);
    for (std::int64_t i = 0; i < n; ++i) b.values[i] = get_f32_le(bytes + d.offset + 4 * i);
    model.blocks.push_back(std::move(b));
  }
  // offsets must not overlap
  std::vector<std::pair<std::int64_t, std::int64_t>> spans;
  for (const auto& d : model.manifest.blocks) spans.emplace_back(d.offset, d.offset + d.length);
  std::sort(spans.begin(), spans.end());
  for (std::size_t k = 1; k < spans.size(); ++k)
    if (spans[k].first < spans[k - 1].second)
      throw FormatError("overlapping block payloads at byte " + std::to_string(spans[k].first));
  return model;
}

void save_model(const ModelManifest& manifest, const std::vector<WeightBlock>& blocks,
                const std::filesystem::path& path) {
  if (manifest.blocks.size() != blocks.size())
    throw InvalidArgument("manifest lists " + std::to_string(manifest.blocks.size()) +
                          " blocks but " + std::to_string(blocks.size()) + " were given");
  std::set<std::string> ids;
  for (const auto& b : blocks) {
    b.validate();
    if (!ids.insert(b.id).second) throw InvalidArgument("duplicate block id '" + b.id + "'");
  }
  // Rebuild offsets from block order so the output is canonical.
  ModelManifest canonical = make_manifest(blocks, manifest.net);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    if (manifest.blocks[k].id != blocks[k].id)
      throw InvalidArgument("manifest/block order mismatch at '" + blocks[k].id + "'");
  }
  std::string blob;
  for (const auto& b : blocks)
    for (Eigen::Index i = 0; i < b.values.size(); ++i) put_f32_le(blob, b.values[i]);

  const auto stem = strip_suffix(path, ".manifest");
  write_file(with_suffix(stem, ".manifest"), manifest_to_json(canonical).dump(2) + "\n");
  write_file(with_suffix(stem, ".blob"), blob);
}

PartitionPolicy partition_policy_from_string(const std::string& s) {
  if (s == "per-tensor") return PartitionPolicy::per_tensor();
  if (s == "per-channel") return PartitionPolicy::per_channel();
  const std::string prefix = "fixed-size(";
  if (s.rfind(prefix, 0) == 0 && s.back() == ')') {
    const auto n = std::stoll(s.substr(prefix.size(), s.size() - prefix.size() - 1));
    if (n < 1) throw InvalidArgument("fixed-size partition needs n >= 1");
    return PartitionPolicy::fixed_size(n);
  }
  throw InvalidArgument("unknown partition policy '" + s + "'");
}

std::vector<WeightBlock> partition(const WeightBlock& block, const PartitionPolicy& policy) {
  block.validate();
  const std::int64_t d = block.values.size();
  std::int64_t chunk = 0;
  switch (policy.kind) {
    case PartitionKind::PerTensor:
      return {block};
    case PartitionKind::PerChannel:
      if (block.kind == BlockKind::GenericVector)
        throw InvalidArgument("block '" + block.id + "': per-channel partition needs a channel axis");
      chunk = block.channel_size();
      break;
    case PartitionKind::FixedSize:
      if (policy.chunk < 1) throw InvalidArgument("fixed-size partition needs n >= 1");
      chunk = policy.chunk;
      break;
  }
  std::vector<WeightBlock> out;
  for (std::int64_t start = 0, k = 0; start < d; start += chunk, ++k) {
    const auto len = std::min(chunk, d - start);
    WeightBlock sub;
    sub.id = block.id + "/" + std::to_string(k);
    sub.values = block.values.segment(start, len);
    sub.shape = {len};
    sub.kind = BlockKind::GenericVector;
    sub.group_size = block.group_size;
    out.push_back(std::move(sub));
  }
  return out;
}

}  // namespace bayesq
