#include "contseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "contseg/errors.hpp"

namespace contseg {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kLesionContrast = 0.35;
constexpr double kMaxAxisScale = 1.15;
constexpr std::int64_t kBlurPad = 2;  // Gaussian kernel radius, sigma 1

std::int64_t lesion_margin(double radius) {
  return static_cast<std::int64_t>(std::ceil(radius * kMaxAxisScale)) + kBlurPad;
}

// Row-major index decomposition.
void unflatten(std::int64_t flat, const Shape& shape, std::int64_t* coords) {
  for (std::size_t d = shape.size(); d-- > 0;) {
    coords[d] = flat % shape[d];
    flat /= shape[d];
  }
}

// Separable Gaussian blur (sigma 1, radius kBlurPad), zero padding.
void gauss_blur_inplace(std::vector<double>& volume, const Shape& shape) {
  double weights[2 * kBlurPad + 1];
  double wsum = 0.0;
  for (std::int64_t t = -kBlurPad; t <= kBlurPad; ++t) {
    weights[t + kBlurPad] = std::exp(-0.5 * static_cast<double>(t * t));
    wsum += weights[t + kBlurPad];
  }
  for (auto& w : weights) w /= wsum;

  const std::int64_t n = static_cast<std::int64_t>(volume.size());
  std::vector<double> scratch(volume.size());
  std::int64_t stride = 1;
  for (std::size_t axis = shape.size(); axis-- > 0;) {
    const std::int64_t extent = shape[axis];
    std::fill(scratch.begin(), scratch.end(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t coord = (i / stride) % extent;
      double acc = 0.0;
      for (std::int64_t t = -kBlurPad; t <= kBlurPad; ++t) {
        const std::int64_t c = coord + t;
        if (c < 0 || c >= extent) continue;
        acc += weights[t + kBlurPad] * volume[static_cast<std::size_t>(i + t * stride)];
      }
      scratch[static_cast<std::size_t>(i)] = acc;
    }
    volume.swap(scratch);
    stride *= extent;
  }
}

struct Wave {
  double amplitude;
  std::vector<double> freq;  // cycles across each axis
  double phase;
};

double wave_value(const Wave& w, const std::int64_t* coords, const Shape& shape) {
  double arg = w.phase;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    arg += kTwoPi * w.freq[d] * static_cast<double>(coords[d]) /
           static_cast<double>(shape[d]);
  }
  return w.amplitude * std::cos(arg);
}

Sample generate_subject(const DomainSpec& spec, int subject_id) {
  Rng rng(mix_seed(spec.seed, 1000 + static_cast<std::uint64_t>(subject_id)));
  const Shape& shape = spec.volume_shape;
  const std::size_t rank = shape.size();
  const std::int64_t numel = shape_numel(shape);

  std::vector<Wave> texture(3);
  for (auto& w : texture) {
    w.amplitude = rng.uniform(0.02, 0.05);
    w.freq.resize(rank);
    for (auto& f : w.freq) f = rng.uniform(0.5, 1.5);
    w.phase = rng.uniform(0.0, kTwoPi);
  }
  Wave bias;
  bias.amplitude = spec.bias_field_strength;
  bias.freq.resize(rank);
  for (auto& f : bias.freq) f = rng.uniform(0.3, 0.8);
  bias.phase = rng.uniform(0.0, kTwoPi);

  struct Lesion {
    std::vector<double> center;
    std::vector<double> inv_axis_sq;  // 1 / (radius * axis_scale)^2
  };
  const std::int64_t count =
      rng.uniform_int(spec.lesion_count_min, spec.lesion_count_max);
  std::vector<Lesion> lesions;
  for (std::int64_t l = 0; l < count; ++l) {
    const double radius = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
    Lesion lesion;
    lesion.inv_axis_sq.resize(rank);
    for (auto& inv : lesion.inv_axis_sq) {
      const double axis = radius * rng.uniform(0.85, kMaxAxisScale);
      inv = 1.0 / (axis * axis);
    }
    const std::int64_t margin = lesion_margin(radius);
    lesion.center.resize(rank);
    for (std::size_t d = 0; d < rank; ++d) {
      lesion.center[d] = static_cast<double>(
          rng.uniform_int(margin, shape[d] - 1 - margin));
    }
    lesions.push_back(std::move(lesion));
  }

  std::vector<double> label(static_cast<std::size_t>(numel), 0.0);
  std::int64_t coords[3] = {0, 0, 0};
  for (std::int64_t i = 0; i < numel; ++i) {
    unflatten(i, shape, coords);
    for (const auto& lesion : lesions) {
      double q = 0.0;
      for (std::size_t d = 0; d < rank; ++d) {
        const double delta = static_cast<double>(coords[d]) - lesion.center[d];
        q += delta * delta * lesion.inv_axis_sq[d];
      }
      if (q <= 1.0) {
        label[static_cast<std::size_t>(i)] = 1.0;
        break;
      }
    }
  }
  gauss_blur_inplace(label, shape);
  for (auto& v : label) v = std::clamp(v, 0.0, 1.0);

  const double sign = spec.polarity == Polarity::LesionBright ? 1.0 : -1.0;
  std::vector<double> image(static_cast<std::size_t>(numel));
  for (std::int64_t i = 0; i < numel; ++i) {
    unflatten(i, shape, coords);
    double intensity = 0.5;
    for (const auto& w : texture) intensity += wave_value(w, coords, shape);
    intensity += sign * kLesionContrast * label[static_cast<std::size_t>(i)];
    intensity *= 1.0 + wave_value(bias, coords, shape);
    intensity += rng.normal(0.0, spec.noise_sigma);
    image[static_cast<std::size_t>(i)] = intensity;
  }

  const auto [lo_it, hi_it] = std::minmax_element(image.begin(), image.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo < 1e-12) {
    std::fill(image.begin(), image.end(), 0.5);
  } else {
    for (auto& v : image) v = (v - lo) / (hi - lo);
  }

  Sample sample;
  sample.image = Tensor::from_values(shape, std::move(image));
  sample.label = Tensor::from_values(shape, std::move(label));
  sample.subject_id = subject_id;
  return sample;
}

}  // namespace

std::string to_string(Polarity polarity) {
  return polarity == Polarity::LesionBright ? "lesion-bright" : "lesion-dark";
}

Polarity polarity_from_string(const std::string& text) {
  if (text == "lesion-bright") return Polarity::LesionBright;
  if (text == "lesion-dark") return Polarity::LesionDark;
  throw ConfigError("unknown polarity '" + text +
                    "' (expected lesion-bright or lesion-dark)");
}

void validate_domain_spec(const DomainSpec& spec) {
  if (spec.name.empty()) throw ConfigError("domain spec: name must not be empty");
  if (spec.n_subjects < 2) {
    throw ConfigError("domain spec '" + spec.name + "': n_subjects must be >= 2");
  }
  if (spec.lesion_count_min < 0 || spec.lesion_count_max < spec.lesion_count_min) {
    throw ConfigError("domain spec '" + spec.name + "': empty lesion count range");
  }
  if (!(spec.lesion_radius_min > 0.0) ||
      spec.lesion_radius_max < spec.lesion_radius_min) {
    throw ConfigError("domain spec '" + spec.name + "': empty lesion radius range");
  }
  if (spec.noise_sigma < 0.0) {
    throw ConfigError("domain spec '" + spec.name + "': noise_sigma must be >= 0");
  }
  if (spec.bias_field_strength < 0.0) {
    throw ConfigError("domain spec '" + spec.name + "': bias_field_strength must be >= 0");
  }
  const std::size_t rank = spec.volume_shape.size();
  if (rank != 2 && rank != 3) {
    throw ConfigError("domain spec '" + spec.name + "': volume rank must be 2 or 3");
  }
  for (const auto extent : spec.volume_shape) {
    if (extent < 4) {
      throw ConfigError("domain spec '" + spec.name + "': volume extents must be >= 4");
    }
  }
  if (spec.lesion_count_max > 0) {
    const std::int64_t margin = lesion_margin(spec.lesion_radius_max);
    for (const auto extent : spec.volume_shape) {
      if (margin > extent - 1 - margin) {
        throw ConfigError("domain spec '" + spec.name +
                          "': lesion radius exceeds the volume extent");
      }
    }
  }
}

std::pair<std::vector<int>, std::vector<int>> domain_split_ids(
    const DomainSpec& spec) {
  return split_subject_ids(spec.n_subjects, 0.8,
                           mix_seed(spec.seed, 0x73706c6974ULL));
}

Domain generate_domain(const DomainSpec& spec) {
  validate_domain_spec(spec);
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(spec.n_subjects));
  for (int s = 0; s < spec.n_subjects; ++s) {
    samples.push_back(generate_subject(spec, s));
  }
  const auto [train_ids, test_ids] = domain_split_ids(spec);
  Domain domain;
  domain.spec = spec;
  for (const int id : train_ids) {
    domain.train.push_back(std::move(samples[static_cast<std::size_t>(id)]));
  }
  for (const int id : test_ids) {
    domain.test.push_back(std::move(samples[static_cast<std::size_t>(id)]));
  }
  return domain;
}

std::pair<std::vector<int>, std::vector<int>> split_subject_ids(
    int n, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("split: ratio must lie in (0,1)");
  }
  if (n < 2) throw ConfigError("split: need at least 2 samples");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  std::int64_t n_train = std::llround(ratio * static_cast<double>(n));
  n_train = std::clamp<std::int64_t>(n_train, 1, n - 1);

  std::pair<std::vector<int>, std::vector<int>> split;
  split.first.assign(order.begin(), order.begin() + n_train);
  split.second.assign(order.begin() + n_train, order.end());
  return split;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_samples(
    std::vector<Sample> samples, double ratio, std::uint64_t seed) {
  const auto [train_ids, test_ids] =
      split_subject_ids(static_cast<int>(samples.size()), ratio, seed);
  std::pair<std::vector<Sample>, std::vector<Sample>> split;
  for (const int id : train_ids) {
    split.first.push_back(std::move(samples[static_cast<std::size_t>(id)]));
  }
  for (const int id : test_ids) {
    split.second.push_back(std::move(samples[static_cast<std::size_t>(id)]));
  }
  return split;
}

std::vector<std::pair<Tensor, Tensor>> sample_patches(const Sample& sample,
                                                      int n,
                                                      const Shape& patch_shape,
                                                      double fg_probability,
                                                      Rng& rng) {
  if (n < 1) throw ContractError("sample_patches: n must be >= 1");
  const Shape& vol_shape = sample.image.shape();
  if (patch_shape.size() != vol_shape.size()) {
    throw ShapeError("sample_patches: patch rank " + shape_str(patch_shape) +
                     " does not match volume " + shape_str(vol_shape));
  }
  for (std::size_t d = 0; d < patch_shape.size(); ++d) {
    if (patch_shape[d] < 1 || patch_shape[d] > vol_shape[d]) {
      throw ShapeError("sample_patches: patch " + shape_str(patch_shape) +
                       " does not fit volume " + shape_str(vol_shape));
    }
  }

  const auto lv = sample.label.values();
  std::vector<std::int64_t> foreground;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (lv[i] > 0.5) foreground.push_back(static_cast<std::int64_t>(i));
  }

  const std::size_t rank = vol_shape.size();
  const auto iv = sample.image.values();
  const std::int64_t patch_numel = shape_numel(patch_shape);

  std::vector<std::pair<Tensor, Tensor>> patches;
  patches.reserve(static_cast<std::size_t>(n));
  std::int64_t center[3] = {0, 0, 0};
  for (int p = 0; p < n; ++p) {
    std::int64_t flat;
    if (!foreground.empty() && rng.bernoulli(fg_probability)) {
      flat = foreground[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(foreground.size()) - 1))];
    } else {
      flat = rng.uniform_int(0, sample.image.numel() - 1);
    }
    unflatten(flat, vol_shape, center);

    std::int64_t start[3] = {0, 0, 0};
    for (std::size_t d = 0; d < rank; ++d) {
      start[d] = std::clamp<std::int64_t>(center[d] - patch_shape[d] / 2, 0,
                                          vol_shape[d] - patch_shape[d]);
    }

    std::vector<double> img_patch(static_cast<std::size_t>(patch_numel));
    std::vector<double> lbl_patch(static_cast<std::size_t>(patch_numel));
    std::int64_t coords[3] = {0, 0, 0};
    for (std::int64_t i = 0; i < patch_numel; ++i) {
      unflatten(i, patch_shape, coords);
      std::int64_t src = 0;
      for (std::size_t d = 0; d < rank; ++d) {
        src = src * vol_shape[d] + start[d] + coords[d];
      }
      img_patch[static_cast<std::size_t>(i)] = iv[static_cast<std::size_t>(src)];
      lbl_patch[static_cast<std::size_t>(i)] = lv[static_cast<std::size_t>(src)];
    }
    patches.emplace_back(Tensor::from_values(patch_shape, std::move(img_patch)),
                         Tensor::from_values(patch_shape, std::move(lbl_patch)));
  }
  return patches;
}

std::vector<std::pair<Tensor, Tensor>> sample_patches(const Sample& sample,
                                                      int n,
                                                      const Shape& patch_shape,
                                                      double fg_probability,
                                                      std::uint64_t seed) {
  Rng rng(seed);
  return sample_patches(sample, n, patch_shape, fg_probability, rng);
}

std::vector<DomainSpec> default_cohort(std::uint64_t base_seed) {
  const int counts[8] = {80, 51, 47, 51, 28, 13, 12, 8};
  const char* names[8] = {"siteA", "siteB", "siteC", "siteD",
                          "siteE", "siteF", "siteG", "siteH"};
  std::vector<DomainSpec> specs;
  for (int i = 0; i < 8; ++i) {
    DomainSpec spec;
    spec.name = names[i];
    spec.n_subjects = counts[i];
    // siteB/siteC flip contrast, standing in for centers whose acquisition
    // inverts lesion appearance.
    spec.polarity = (i == 1 || i == 2) ? Polarity::LesionDark : Polarity::LesionBright;
    spec.seed = mix_seed(base_seed, 100 + static_cast<std::uint64_t>(i));
    specs.push_back(spec);
  }
  return specs;
}

std::vector<DomainSpec> desk_cohort(std::uint64_t base_seed) {
  const int counts[4] = {12, 10, 10, 8};
  const char* names[4] = {"deskA", "deskB", "deskC", "deskD"};
  std::vector<DomainSpec> specs;
  for (int i = 0; i < 4; ++i) {
    DomainSpec spec;
    spec.name = names[i];
    spec.n_subjects = counts[i];
    spec.polarity = i == 1 ? Polarity::LesionDark : Polarity::LesionBright;
    spec.seed = mix_seed(base_seed, 200 + static_cast<std::uint64_t>(i));
    specs.push_back(spec);
  }
  return specs;
}

}  // namespace contseg
