#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "contseg/autodiff.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

struct ModelConfig {
  int levels = 2;         // encoder depth including the bottleneck
  int base_features = 8;  // width at level 0, doubled per level
  int spatial_rank = 2;   // 2 or 3
  int in_channels = 1;
  bool residual = true;

  bool operator==(const ModelConfig&) const = default;
};

void validate_model_config(const ModelConfig& config);  // ConfigError

// Checks that a patch of the given spatial shape survives the model's
// pooling pyramid: every extent divisible by 2^(levels-1) and large enough
// that the bottleneck keeps a usable extent.
void validate_patch_config(const ModelConfig& config, const Shape& patch_shape);

// Feature widths per level: base_features * 2^i.
std::vector<int> level_widths(const ModelConfig& config);

// Residual mini-UNet with a normalized-ReLU soft-segmentation head.
//
// forward() maps [N, in_channels, spatial...] to [N, 1, spatial...] with all
// values in [0, 1]. Parameters are He-initialized deterministically from the
// seed. A Model is immutable during evaluation and can be shared read-only;
// training mutates parameters and needs exclusive access.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t init_seed() const { return seed_; }

  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  std::int64_t parameter_count() const;
  void zero_grads();

  Tensor forward(Graph& graph, const Tensor& batch) const;

  // Convenience inference: accepts a bare [spatial...] volume or a full
  // [N, C, spatial...] batch and returns a mask of the same form.
  Tensor predict(const Tensor& input) const;

  // Deep copy with independent parameter storage.
  Model clone() const;

  // Re-draws decoder and head parameters (encoder untouched); used by the
  // encoder-only transfer mode between training stages.
  void reinitialize_decoder(std::uint64_t seed);

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  struct BlockParams {
    Tensor w1, b1, w2, b2;
    Tensor proj_w, proj_b;  // 1x1 projection when channel counts differ
    bool has_proj = false;
  };
  struct DecoderStage {
    Tensor up_w, up_b;  // conv after nearest-neighbour upsampling
    BlockParams block;
  };

  Tensor run_block(Graph& graph, const Tensor& x, const BlockParams& p) const;
  void init_tensor(Tensor& t, std::size_t index, std::uint64_t seed);
  Tensor make_param(const std::string& name, Shape shape, std::uint64_t seed,
                    bool he_init);
  void build(std::uint64_t seed);

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<BlockParams> encoder_;
  std::vector<DecoderStage> decoder_;  // index i refines level i
  Tensor head_w_, head_b_;
  std::size_t decoder_param_start_ = 0;  // params_ index where decoder begins
};

}  // namespace contseg
