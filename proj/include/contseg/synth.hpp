#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "contseg/rng.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

// Which way lesions contrast against the background. The polarity flip is
// the principal inter-center shift of the synthetic cohort, standing in for
// acquisition differences that invert lesion appearance.
enum class Polarity { LesionBright, LesionDark };

std::string to_string(Polarity polarity);
Polarity polarity_from_string(const std::string& text);

struct DomainSpec {
  std::string name = "domain";
  int n_subjects = 8;
  Polarity polarity = Polarity::LesionBright;
  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_radius_min = 3.0;
  double lesion_radius_max = 6.0;
  double noise_sigma = 0.03;
  double bias_field_strength = 0.1;
  Shape volume_shape = {64, 64};
  std::uint64_t seed = 0;

  bool operator==(const DomainSpec&) const = default;
};

void validate_domain_spec(const DomainSpec& spec);  // ConfigError

struct Sample {
  Tensor image;  // min-max normalized to [0,1]
  Tensor label;  // soft mask in [0,1]
  int subject_id = -1;
};

struct Domain {
  DomainSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Generates one synthetic center: smooth background texture, multiplicative
// low-frequency bias field, additive Gaussian noise, and blurred ellipsoid
// lesions whose boundary voxels take fractional label values. Fully
// deterministic from spec.seed, including the 80/20 train/test split.
Domain generate_domain(const DomainSpec& spec);

// Seed-deterministic shuffled split; |train| = round(ratio*n) clamped so
// both sides stay non-empty. Fewer than 2 samples is a ConfigError.
std::pair<std::vector<Sample>, std::vector<Sample>> split_samples(
    std::vector<Sample> samples, double ratio, std::uint64_t seed);

// Index-level form of the split, usable without materialized samples.
std::pair<std::vector<int>, std::vector<int>> split_subject_ids(
    int n, double ratio, std::uint64_t seed);

// The exact 80/20 subject split generate_domain will produce for this spec,
// computable without generating any volumes.
std::pair<std::vector<int>, std::vector<int>> domain_split_ids(
    const DomainSpec& spec);

// Weighted patch sampler: with probability fg_probability the patch center
// is drawn uniformly from voxels with label > 0.5, otherwise uniformly from
// all voxels; centers are clamped so the patch lies inside the volume.
// Samples without foreground fall back to uniform sampling.
std::vector<std::pair<Tensor, Tensor>> sample_patches(const Sample& sample,
                                                      int n,
                                                      const Shape& patch_shape,
                                                      double fg_probability,
                                                      Rng& rng);
std::vector<std::pair<Tensor, Tensor>> sample_patches(const Sample& sample,
                                                      int n,
                                                      const Shape& patch_shape,
                                                      double fg_probability,
                                                      std::uint64_t seed);

// The 8-center cohort mirroring the subject counts {80,51,47,51,28,13,12,8};
// the second and third centers are lesion-dark, the rest lesion-bright.
std::vector<DomainSpec> default_cohort(std::uint64_t base_seed);

// Small 4-center cohort used by the acceptance experiments: one lesion-dark
// center among lesion-bright ones.
std::vector<DomainSpec> desk_cohort(std::uint64_t base_seed);

}  // namespace contseg
