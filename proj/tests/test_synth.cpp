#include <doctest.h>

#include <filesystem>
#include <set>

#include "contseg/archive.hpp"
#include "contseg/errors.hpp"
#include "contseg/rng.hpp"
#include "contseg/synth.hpp"

using namespace contseg;

namespace {

DomainSpec small_spec(const std::string& name = "alpha",
                      Polarity polarity = Polarity::LesionBright) {
  DomainSpec spec;
  spec.name = name;
  spec.n_subjects = 5;
  spec.polarity = polarity;
  spec.volume_shape = {32, 32};
  spec.lesion_radius_min = 2.5;
  spec.lesion_radius_max = 4.0;
  spec.seed = 31;
  return spec;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a.values()[i] != b.values()[i]) return false;
  }
  return true;
}

double masked_mean(const Sample& sample, bool foreground) {
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < sample.image.numel(); ++i) {
    const bool fg = sample.label.values()[i] > 0.5;
    if (fg == foreground) {
      sum += sample.image.values()[i];
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

TEST_CASE("identical specs generate bitwise-identical domains") {
  const Domain a = generate_domain(small_spec());
  const Domain b = generate_domain(small_spec());
  REQUIRE(a.train.size() == b.train.size());
  REQUIRE(a.test.size() == b.test.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].subject_id == b.train[i].subject_id);
    CHECK(tensors_equal(a.train[i].image, b.train[i].image));
    CHECK(tensors_equal(a.train[i].label, b.train[i].label));
  }
}

TEST_CASE("labels are soft: in range with fractional boundary voxels") {
  const Domain domain = generate_domain(small_spec());
  for (const auto* split : {&domain.train, &domain.test}) {
    for (const auto& sample : *split) {
      bool has_soft = false;
      for (const double v : sample.label.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        has_soft = has_soft || (v > 0.05 && v < 0.95);
      }
      CHECK(has_soft);
    }
  }
}

TEST_CASE("lesion-dark domains invert the intensity ordering for every subject") {
  const Domain dark = generate_domain(small_spec("dark", Polarity::LesionDark));
  for (const auto* split : {&dark.train, &dark.test}) {
    for (const auto& sample : *split) {
      CHECK(masked_mean(sample, true) < masked_mean(sample, false));
    }
  }
  const Domain bright = generate_domain(small_spec("bright", Polarity::LesionBright));
  for (const auto& sample : bright.train) {
    CHECK(masked_mean(sample, true) > masked_mean(sample, false));
  }
}

TEST_CASE("polarities are linearly separable on mean lesion intensity") {
  const auto specs = default_cohort(0);
  double max_dark = 0.0, min_bright = 1.0;
  for (std::size_t i = 0; i < 4; ++i) {  // two bright, two dark centers
    DomainSpec spec = specs[i];
    spec.n_subjects = 4;  // keep the check quick
    const Domain domain = generate_domain(spec);
    for (const auto& sample : domain.train) {
      const double fg = masked_mean(sample, true);
      if (spec.polarity == Polarity::LesionDark) {
        max_dark = std::max(max_dark, fg);
      } else {
        min_bright = std::min(min_bright, fg);
      }
    }
  }
  CHECK(max_dark < min_bright);  // a single threshold separates them
}

TEST_CASE("split honours the 80/20 ratio and stays non-empty") {
  const auto ids10 = split_subject_ids(10, 0.8, 1);
  CHECK(ids10.first.size() == 8);
  CHECK(ids10.second.size() == 2);

  const auto ids2 = split_subject_ids(2, 0.8, 1);
  CHECK(ids2.first.size() == 1);
  CHECK(ids2.second.size() == 1);

  CHECK_THROWS_AS(split_subject_ids(1, 0.8, 1), ConfigError);
  CHECK_THROWS_AS(split_subject_ids(10, 1.0, 1), ConfigError);
}

TEST_CASE("split is deterministic per seed and covers every subject once") {
  const auto a = split_subject_ids(20, 0.8, 5);
  const auto b = split_subject_ids(20, 0.8, 5);
  CHECK(a == b);
  const auto c = split_subject_ids(20, 0.8, 6);
  CHECK(a != c);

  std::set<int> seen(a.first.begin(), a.first.end());
  seen.insert(a.second.begin(), a.second.end());
  CHECK(seen.size() == 20);
}

TEST_CASE("sample_patches returns the requested count with centered lesions") {
  const Domain domain = generate_domain(small_spec());
  const Sample& sample = domain.train.front();

  auto patches = sample_patches(sample, 4, {16, 16}, 0.75, 77);
  CHECK(patches.size() == 4);
  for (const auto& [image, label] : patches) {
    CHECK(image.shape() == Shape{16, 16});
    CHECK(label.shape() == Shape{16, 16});
  }

  // fg_probability = 1 on a lesion-bearing sample: every patch has foreground
  for (int trial = 0; trial < 5; ++trial) {
    auto fg_patches = sample_patches(sample, 8, {16, 16}, 1.0,
                                     static_cast<std::uint64_t>(trial));
    for (const auto& [image, label] : fg_patches) {
      bool has_fg = false;
      for (const double v : label.values()) has_fg = has_fg || v > 0.5;
      CHECK(has_fg);
    }
  }
}

TEST_CASE("sampling from an all-background sample falls back to uniform") {
  Sample sample;
  sample.image = Tensor::full({16, 16}, 0.5);
  sample.label = Tensor::zeros({16, 16});
  sample.subject_id = 0;
  auto patches = sample_patches(sample, 4, {8, 8}, 0.9, 3);
  CHECK(patches.size() == 4);
}

TEST_CASE("oversized patches are rejected") {
  const Domain domain = generate_domain(small_spec());
  CHECK_THROWS_AS(sample_patches(domain.train.front(), 1, {64, 64}, 0.5, 1),
                  ShapeError);
}

TEST_CASE("lesions larger than the volume are a config error") {
  DomainSpec spec = small_spec();
  spec.lesion_radius_max = 40.0;
  CHECK_THROWS_AS(generate_domain(spec), ConfigError);
}

TEST_CASE("the default cohort mirrors the eight-center shape") {
  const auto specs = default_cohort(0);
  REQUIRE(specs.size() == 8);
  const std::vector<int> counts = {80, 51, 47, 51, 28, 13, 12, 8};
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(specs[i].n_subjects == counts[i]);
  }
  CHECK(specs[1].polarity == Polarity::LesionDark);
  CHECK(specs[2].polarity == Polarity::LesionDark);
  CHECK(specs[0].polarity == Polarity::LesionBright);
}

TEST_CASE("domain archives round-trip bitwise and skip rewrites") {
  const auto dir = std::filesystem::temp_directory_path() / "contseg_test_archive";
  std::filesystem::remove_all(dir);

  const Domain domain = generate_domain(small_spec());
  CHECK(write_domain_archive(dir, domain));
  CHECK_FALSE(write_domain_archive(dir, domain));  // idempotent

  const Domain loaded = read_domain_archive(dir, domain.spec.name);
  CHECK(loaded.spec == domain.spec);
  REQUIRE(loaded.train.size() == domain.train.size());
  REQUIRE(loaded.test.size() == domain.test.size());
  for (std::size_t i = 0; i < domain.train.size(); ++i) {
    CHECK(loaded.train[i].subject_id == domain.train[i].subject_id);
    CHECK(tensors_equal(loaded.train[i].image, domain.train[i].image));
    CHECK(tensors_equal(loaded.train[i].label, domain.train[i].label));
  }
  for (std::size_t i = 0; i < domain.test.size(); ++i) {
    CHECK(loaded.test[i].subject_id == domain.test[i].subject_id);
    CHECK(tensors_equal(loaded.test[i].image, domain.test[i].image));
  }

  // a different spec at the same location is not "up to date"
  DomainSpec other = small_spec();
  other.seed = 32;
  CHECK_FALSE(domain_archive_up_to_date(dir, other));
  std::filesystem::remove_all(dir);
}
