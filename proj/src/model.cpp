#include "contseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "contseg/errors.hpp"
#include "contseg/rng.hpp"
#include "contseg/serialize.hpp"

namespace contseg {

namespace {
constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'M', 'D', 'L', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void validate_model_config(const ModelConfig& config) {
  if (config.levels < 1) throw ConfigError("model: levels must be >= 1");
  if (config.base_features < 1) throw ConfigError("model: base_features must be >= 1");
  if (config.spatial_rank != 2 && config.spatial_rank != 3) {
    throw ConfigError("model: spatial_rank must be 2 or 3");
  }
  if (config.in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
}

void validate_patch_config(const ModelConfig& config, const Shape& patch_shape) {
  validate_model_config(config);
  if (static_cast<int>(patch_shape.size()) != config.spatial_rank) {
    throw ConfigError("patch rank " + shape_str(patch_shape) +
                      " does not match spatial_rank " +
                      std::to_string(config.spatial_rank));
  }
  const std::int64_t divisor = std::int64_t{1} << (config.levels - 1);
  const std::int64_t minimum = std::int64_t{1} << config.levels;
  for (const auto extent : patch_shape) {
    if (extent % divisor != 0) {
      throw ConfigError("patch extent " + std::to_string(extent) +
                        " is not divisible by 2^(levels-1) = " +
                        std::to_string(divisor));
    }
    if (extent < minimum) {
      throw ConfigError(
          "levels too deep for patch extent " + std::to_string(extent) +
          ": the spatial extent would collapse under " +
          std::to_string(config.levels) + "-level pooling");
    }
  }
}

std::vector<int> level_widths(const ModelConfig& config) {
  std::vector<int> widths(static_cast<std::size_t>(config.levels));
  for (int i = 0; i < config.levels; ++i) {
    widths[static_cast<std::size_t>(i)] = config.base_features << i;
  }
  return widths;
}

Model::Model(ModelConfig config, std::uint64_t seed)
    : config_(config), seed_(seed) {
  validate_model_config(config_);
  build(seed);
}

void Model::init_tensor(Tensor& t, std::size_t index, std::uint64_t seed) {
  // He fan-in initialization; fan_in = in_channels * kernel volume.
  const auto& shape = t.shape();
  std::int64_t fan_in = 1;
  for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  for (auto& v : t.values_mut()) v = rng.normal(0.0, stddev);
}

Tensor Model::make_param(const std::string& name, Shape shape,
                         std::uint64_t seed, bool he_init) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  if (he_init) init_tensor(t, params_.size(), seed);
  params_.emplace_back(name, t);
  return t;
}

void Model::build(std::uint64_t seed) {
  const auto widths = level_widths(config_);
  const int levels = config_.levels;
  const int rank = config_.spatial_rank;

  const auto kshape = [rank](int out_ch, int in_ch, std::int64_t k) {
    Shape s{out_ch, in_ch};
    for (int d = 0; d < rank; ++d) s.push_back(k);
    return s;
  };
  const auto make_block = [&](const std::string& prefix, int in_ch, int out_ch) {
    BlockParams p;
    p.w1 = make_param(prefix + ".conv1.weight", kshape(out_ch, in_ch, 3), seed, true);
    p.b1 = make_param(prefix + ".conv1.bias", {out_ch}, seed, false);
    p.w2 = make_param(prefix + ".conv2.weight", kshape(out_ch, out_ch, 3), seed, true);
    p.b2 = make_param(prefix + ".conv2.bias", {out_ch}, seed, false);
    if (config_.residual && in_ch != out_ch) {
      p.proj_w = make_param(prefix + ".proj.weight", kshape(out_ch, in_ch, 1), seed, true);
      p.proj_b = make_param(prefix + ".proj.bias", {out_ch}, seed, false);
      p.has_proj = true;
    }
    return p;
  };

  int in_ch = config_.in_channels;
  for (int i = 0; i < levels; ++i) {
    encoder_.push_back(make_block("enc" + std::to_string(i), in_ch, widths[i]));
    in_ch = widths[i];
  }

  decoder_param_start_ = params_.size();
  decoder_.resize(static_cast<std::size_t>(levels - 1));
  for (int i = levels - 2; i >= 0; --i) {
    DecoderStage stage;
    const std::string prefix = "dec" + std::to_string(i);
    stage.up_w = make_param(prefix + ".up.weight",
                            kshape(widths[i], widths[i + 1], 3), seed, true);
    stage.up_b = make_param(prefix + ".up.bias", {widths[i]}, seed, false);
    stage.block = make_block(prefix, 2 * widths[i], widths[i]);
    decoder_[static_cast<std::size_t>(i)] = stage;
  }

  head_w_ = make_param("head.weight", kshape(1, widths[0], 1), seed, true);
  head_b_ = make_param("head.bias", {1}, seed, false);
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void Model::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

Tensor Model::run_block(Graph& graph, const Tensor& x,
                        const BlockParams& p) const {
  Tensor y = graph.relu(graph.conv(x, p.w1, p.b1));
  y = graph.conv(y, p.w2, p.b2);
  if (config_.residual) {
    const Tensor res = p.has_proj ? graph.conv(x, p.proj_w, p.proj_b) : x;
    y = graph.add(y, res);
  }
  return graph.relu(y);
}

Tensor Model::forward(Graph& graph, const Tensor& batch) const {
  if (!batch.defined()) throw StateError("forward: undefined input");
  if (batch.rank() != config_.spatial_rank + 2) {
    throw ShapeError("forward: expected rank " +
                     std::to_string(config_.spatial_rank + 2) + " batch, got " +
                     shape_str(batch.shape()));
  }
  if (batch.shape()[1] != config_.in_channels) {
    throw ShapeError("forward: expected " + std::to_string(config_.in_channels) +
                     " input channels, got " + shape_str(batch.shape()));
  }
  const std::int64_t divisor = std::int64_t{1} << (config_.levels - 1);
  for (int d = 2; d < batch.rank(); ++d) {
    if (batch.shape()[d] % divisor != 0) {
      throw ShapeError("forward: spatial extents " + shape_str(batch.shape()) +
                       " must be divisible by " + std::to_string(divisor));
    }
  }

  std::vector<Tensor> skips;
  Tensor cur = run_block(graph, batch, encoder_[0]);
  for (int i = 1; i < config_.levels; ++i) {
    skips.push_back(cur);
    cur = run_block(graph, graph.max_pool(cur), encoder_[static_cast<std::size_t>(i)]);
  }
  for (int i = config_.levels - 2; i >= 0; --i) {
    const auto& stage = decoder_[static_cast<std::size_t>(i)];
    Tensor up = graph.conv(graph.upsample_nearest(cur), stage.up_w, stage.up_b);
    cur = run_block(graph, graph.concat_channels(up, skips[static_cast<std::size_t>(i)]),
                    stage.block);
  }
  return graph.normalized_relu(graph.conv(cur, head_w_, head_b_));
}

Tensor Model::predict(const Tensor& input) const {
  if (!input.defined()) throw StateError("predict: undefined input");
  if (input.rank() == config_.spatial_rank + 2) {
    Graph graph;
    return forward(graph, input);
  }
  if (input.rank() != config_.spatial_rank) {
    throw ShapeError("predict: expected a [spatial...] volume or [N,C,spatial...] batch, got " +
                     shape_str(input.shape()));
  }
  Shape wrapped{1, 1};
  for (const auto extent : input.shape()) wrapped.push_back(extent);
  Tensor batch = Tensor::from_values(
      wrapped, std::vector<double>(input.values().begin(), input.values().end()));
  Graph graph;
  Tensor out = forward(graph, batch);
  return Tensor::from_values(
      input.shape(), std::vector<double>(out.values().begin(), out.values().end()));
}

Model Model::clone() const {
  Model copy(config_, seed_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].second.values();
    auto dst = copy.params_[i].second.values_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

void Model::reinitialize_decoder(std::uint64_t seed) {
  for (std::size_t i = decoder_param_start_; i < params_.size(); ++i) {
    auto& [name, tensor] = params_[i];
    if (name.ends_with(".bias")) {
      std::fill(tensor.values_mut().begin(), tensor.values_mut().end(), 0.0);
    } else {
      init_tensor(tensor, i, seed);
    }
  }
}

void Model::save(const std::filesystem::path& path) const {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(config_.levels));
  write_u32(os, static_cast<std::uint32_t>(config_.base_features));
  write_u32(os, static_cast<std::uint32_t>(config_.spatial_rank));
  write_u32(os, static_cast<std::uint32_t>(config_.in_channels));
  write_u8(os, config_.residual ? 1 : 0);
  write_u64(os, seed_);
  write_u32(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, tensor] : params_) {
    write_string(os, name);
    write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (const auto extent : tensor.shape()) {
      write_u64(os, static_cast<std::uint64_t>(extent));
    }
    for (const double v : tensor.values()) write_f64(os, v);
  }
  atomic_write_file(path, os.str());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a model checkpoint: " + path.string());
  }
  if (read_u32(is) != kVersion) {
    throw IoError("unsupported checkpoint version: " + path.string());
  }
  ModelConfig config;
  config.levels = static_cast<int>(read_u32(is));
  config.base_features = static_cast<int>(read_u32(is));
  config.spatial_rank = static_cast<int>(read_u32(is));
  config.in_channels = static_cast<int>(read_u32(is));
  config.residual = read_u8(is) != 0;
  const std::uint64_t seed = read_u64(is);

  Model model(config, seed);
  const auto count = read_u32(is);
  if (count != model.params_.size()) {
    throw IoError("checkpoint parameter count mismatch in " + path.string());
  }
  for (auto& [name, tensor] : model.params_) {
    const std::string stored = read_string(is);
    if (stored != name) {
      throw IoError("checkpoint parameter order mismatch: expected " + name +
                    ", found " + stored);
    }
    const auto rank = read_u32(is);
    Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<std::int64_t>(read_u64(is));
    if (shape != tensor.shape()) {
      throw IoError("checkpoint shape mismatch for " + name);
    }
    for (auto& v : tensor.values_mut()) v = read_f64(is);
  }
  return model;
}

}  // namespace contseg
