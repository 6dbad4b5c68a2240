#ifndef BAYESQ_MODEL_STORE_HPP
#define BAYESQ_MODEL_STORE_HPP

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bayesq {

enum class BlockKind { DenseMatrix, ConvFilter, GenericVector };

std::string to_string(BlockKind kind);
BlockKind block_kind_from_string(const std::string& s);

/// A named, contiguous slice of model weights. Values are stored as 32-bit
/// reals (the on-disk precision) so save/load roundtrips bit-exactly.
struct WeightBlock {
  std::string id;
  Eigen::VectorXf values;
  std::vector<std::int64_t> shape;
  BlockKind kind = BlockKind::GenericVector;
  std::int64_t group_size = 64;

  Eigen::Index size() const { return values.size(); }
  /// Rows and columns for dense-matrix / conv-filter blocks (first axis is
  /// the channel axis, remaining axes are flattened).
  std::int64_t channels() const;
  std::int64_t channel_size() const;

  /// Throws InvalidArgument when a structural invariant is violated.
  void validate() const;
};

/// One dense layer of a toy feed-forward net, referencing blocks by id.
struct NetLayerSpec {
  std::string weight;
  std::string bias;  // empty: no bias
  std::string activation = "identity";
};

struct BlockDescriptor {
  std::string id;
  std::vector<std::int64_t> shape;
  BlockKind kind = BlockKind::GenericVector;
  std::int64_t group_size = 64;
  std::int64_t offset = 0;  // bytes into the blob
  std::int64_t length = 0;  // bytes
};

struct ModelManifest {
  int format_version = 1;
  std::string endianness = "little";
  std::vector<BlockDescriptor> blocks;
  /// Optional net-topology extension used by toy nets.
  std::vector<NetLayerSpec> net;
};

struct Model {
  ModelManifest manifest;
  std::vector<WeightBlock> blocks;

  const WeightBlock& block(const std::string& id) const;
  std::int64_t total_weights() const;
};

/// Builds a manifest (offsets/lengths in order) for a block list.
ModelManifest make_manifest(const std::vector<WeightBlock>& blocks,
                            std::vector<NetLayerSpec> net = {});

/// `path` may name the `.manifest` file or the common stem.
Model load_model(const std::filesystem::path& path);
void save_model(const ModelManifest& manifest, const std::vector<WeightBlock>& blocks,
                const std::filesystem::path& path);
inline void save_model(const Model& model, const std::filesystem::path& path) {
  save_model(model.manifest, model.blocks, path);
}

/// Stem handling shared by every two-file container in the toolkit.
std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& ext);
std::filesystem::path strip_suffix(const std::filesystem::path& path, const std::string& ext);

enum class PartitionKind { PerTensor, PerChannel, FixedSize };

struct PartitionPolicy {
  PartitionKind kind = PartitionKind::PerTensor;
  std::int64_t chunk = 64;  // FixedSize only

  static PartitionPolicy per_tensor() { return {}; }
  static PartitionPolicy per_channel() { return {PartitionKind::PerChannel, 0}; }
  static PartitionPolicy fixed_size(std::int64_t n) { return {PartitionKind::FixedSize, n}; }
};

PartitionPolicy partition_policy_from_string(const std::string& s);

/// Splits a block into sub-blocks that cover the parent exactly once, in
/// order. Sub-block ids are `<parent>/<index>`.
std::vector<WeightBlock> partition(const WeightBlock& block, const PartitionPolicy& policy);

}  // namespace bayesq

#endif  // BAYESQ_MODEL_STORE_HPP
