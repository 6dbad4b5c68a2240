#ifndef BAYESQ_PACKER_HPP
#define BAYESQ_PACKER_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bayesq/codebook.hpp"
#include "bayesq/model_store.hpp"

namespace bayesq {

/// Metadata bit widths. Zero means the field is not stored.
struct CostModel {
  std::int64_t scale_bits = 16;
  std::int64_t zero_point_bits = 16;
  std::int64_t code_bits = 16;
  std::int64_t header_bits = 64;  // per block: bit-width, designer, counts
  std::int64_t group_size = 64;
  std::int64_t lane_bits = 8;     // payload streams are padded to this width
  std::int64_t vq_group = 2;

  void validate() const;
};

/// Exact per-block storage in bits.
struct CostLedger {
  std::int64_t payload = 0;   // scalar index payload N m
  std::int64_t scales = 0;    // per-group scale and zero-point
  std::int64_t codebook = 0;  // LUT / VQ codepoints
  std::int64_t indices = 0;   // VQ index stream
  std::int64_t headers = 0;
  std::int64_t padding = 0;

  std::int64_t total() const { return payload + scales + codebook + indices + headers + padding; }
  bool operator==(const CostLedger&) const = default;
};

/// Index width in bits for a designer at bit-width m (m g for vector groups).
int index_bits(int m, Designer designer, const CostModel& cm);

CostLedger block_cost(std::int64_t n, int m, Designer designer, const CostModel& cm);
inline CostLedger block_cost(const WeightBlock& block, int m, Designer designer, CostModel cm) {
  cm.group_size = block.group_size;
  return block_cost(block.size(), m, designer, cm);
}
/// Vector quantizer with explicit K and group g.
CostLedger vq_cost(std::int64_t n, std::int64_t g, std::int64_t levels, const CostModel& cm);

double average_bits(const std::vector<CostLedger>& ledgers, std::int64_t total_weights);

/// LSB-first, `bits` per index, contiguous across byte boundaries, zero-padded.
std::vector<std::uint8_t> pack_indices(const std::vector<std::int64_t>& indices, int bits);
std::vector<std::int64_t> unpack_indices(const std::vector<std::uint8_t>& bytes, std::size_t count, int bits);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);

struct PackedBlock {
  std::string id;
  std::vector<std::int64_t> shape;
  BlockKind kind = BlockKind::GenericVector;
  int bits = 32;
  Designer designer = Designer::None;
  std::int64_t group_size = 64;
  std::int64_t vq_group = 1;
  std::int64_t index_count = 0;
  std::vector<CompiledAffine> groups;
  std::vector<std::uint8_t> stream;  // packed indices, or raw f32 for passthrough
  CostLedger ledger;
  std::uint32_t crc = 0;

  std::int64_t size() const;
  std::vector<std::int64_t> indices() const;
  Eigen::VectorXd dequantize() const;
};

struct PackedModel {
  CostModel cost;
  std::vector<PackedBlock> blocks;

  std::int64_t total_bits() const;
  std::int64_t total_weights() const;
  double average_bits() const;
  const PackedBlock& block(const std::string& id) const;
};

/// Quantizes, compiles, and packs one block.
PackedBlock pack_block(const WeightBlock& block, int m, Designer designer, const Codebook* cb,
                       const Whitener* whitener, const CostModel& cm, ExportMode mode = ExportMode::Lut);

/// `<stem>.qmanifest` + `<stem>.qblob`.
void export_packed(const PackedModel& model, const std::filesystem::path& stem);
/// Verifies checksums and recomputes every ledger; throws VerificationError on mismatch.
PackedModel import_packed(const std::filesystem::path& path);

}  // namespace bayesq

#endif  // BAYESQ_PACKER_HPP
