#include "contseg/archive.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "contseg/errors.hpp"
#include "contseg/serialize.hpp"

namespace contseg {

namespace {

constexpr char kTensorMagic[8] = {'C', 'S', 'E', 'G', 'T', 'E', 'N', '1'};

std::string shape_field(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

Shape parse_shape_field(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    shape.push_back(std::stoll(part));
  }
  if (shape.empty()) throw IoError("empty shape field '" + text + "'");
  return shape;
}

std::string subject_file(int subject_id, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%03d.%s.raw", subject_id, kind);
  return buf;
}

void write_samples(const std::filesystem::path& dir,
                   const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  for (const auto& sample : samples) {
    write_tensor_file(dir / subject_file(sample.subject_id, "image"), sample.image);
    write_tensor_file(dir / subject_file(sample.subject_id, "label"), sample.label);
  }
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const Tensor& tensor) {
  std::ostringstream os(std::ios::binary);
  os.write(kTensorMagic, sizeof(kTensorMagic));
  write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
  for (const auto extent : tensor.shape()) {
    write_u64(os, static_cast<std::uint64_t>(extent));
  }
  for (const double v : tensor.values()) write_f64(os, v);
  atomic_write_file(path, os.str());
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open tensor file: " + path.string());
  char magic[8];
  read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kTensorMagic, sizeof(kTensorMagic)) != 0) {
    throw IoError("not a tensor file: " + path.string());
  }
  const auto rank = read_u32(is);
  if (rank == 0 || rank > 4) throw IoError("bad tensor rank in " + path.string());
  Shape shape(rank);
  for (auto& extent : shape) extent = static_cast<std::int64_t>(read_u64(is));
  const auto n = shape_numel(shape);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = read_f64(is);
  return Tensor::from_values(std::move(shape), std::move(values));
}

std::string spec_manifest_text(const DomainSpec& spec, int n_train, int n_test) {
  std::ostringstream os;
  os << "format = 1\n";
  os << "name = " << spec.name << "\n";
  os << "n_subjects = " << spec.n_subjects << "\n";
  os << "polarity = " << to_string(spec.polarity) << "\n";
  os << "lesion_count_min = " << spec.lesion_count_min << "\n";
  os << "lesion_count_max = " << spec.lesion_count_max << "\n";
  os << "lesion_radius_min = " << format_double(spec.lesion_radius_min) << "\n";
  os << "lesion_radius_max = " << format_double(spec.lesion_radius_max) << "\n";
  os << "noise_sigma = " << format_double(spec.noise_sigma) << "\n";
  os << "bias_field_strength = " << format_double(spec.bias_field_strength) << "\n";
  os << "volume_shape = " << shape_field(spec.volume_shape) << "\n";
  os << "seed = " << spec.seed << "\n";
  std::string body = os.str();
  std::ostringstream full;
  full << body;
  full << "spec_hash = " << hash_hex(fnv1a64(body)) << "\n";
  full << "n_train = " << n_train << "\n";
  full << "n_test = " << n_test << "\n";
  return full.str();
}

std::uint64_t spec_hash(const DomainSpec& spec) {
  const std::string manifest = spec_manifest_text(spec, 0, 0);
  // Hash covers the spec body only, not the derived counts.
  const auto pos = manifest.find("spec_hash = ");
  return fnv1a64(manifest.substr(0, pos));
}

namespace {

std::string id_list_field(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::vector<int> parse_id_list(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) ids.push_back(std::stoi(part));
  return ids;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

}  // namespace

std::string domain_manifest_text(const DomainSpec& spec) {
  const auto [train_ids, test_ids] = domain_split_ids(spec);
  std::ostringstream os;
  os << spec_manifest_text(spec, static_cast<int>(train_ids.size()),
                           static_cast<int>(test_ids.size()));
  os << "train_order = " << id_list_field(train_ids) << "\n";
  os << "test_order = " << id_list_field(test_ids) << "\n";
  return os.str();
}

DomainSpec parse_spec_manifest(const std::string& text) {
  const auto kv = parse_kv(text);
  const auto need = [&kv](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw IoError("manifest missing key '" + key + "'");
    return it->second;
  };
  DomainSpec spec;
  spec.name = need("name");
  spec.n_subjects = std::stoi(need("n_subjects"));
  spec.polarity = polarity_from_string(need("polarity"));
  spec.lesion_count_min = std::stoi(need("lesion_count_min"));
  spec.lesion_count_max = std::stoi(need("lesion_count_max"));
  spec.lesion_radius_min = parse_double(need("lesion_radius_min"));
  spec.lesion_radius_max = parse_double(need("lesion_radius_max"));
  spec.noise_sigma = parse_double(need("noise_sigma"));
  spec.bias_field_strength = parse_double(need("bias_field_strength"));
  spec.volume_shape = parse_shape_field(need("volume_shape"));
  spec.seed = std::stoull(need("seed"));
  return spec;
}

bool domain_archive_up_to_date(const std::filesystem::path& dir,
                               const DomainSpec& spec) {
  const auto domain_dir = dir / spec.name;
  const auto manifest_path = domain_dir / "manifest.txt";
  if (!std::filesystem::exists(manifest_path)) return false;
  if (read_file(manifest_path) != domain_manifest_text(spec)) return false;
  const auto [train_ids, test_ids] = domain_split_ids(spec);
  for (const int id : train_ids) {
    if (!std::filesystem::exists(domain_dir / "train" / subject_file(id, "image")) ||
        !std::filesystem::exists(domain_dir / "train" / subject_file(id, "label"))) {
      return false;
    }
  }
  for (const int id : test_ids) {
    if (!std::filesystem::exists(domain_dir / "test" / subject_file(id, "image")) ||
        !std::filesystem::exists(domain_dir / "test" / subject_file(id, "label"))) {
      return false;
    }
  }
  return true;
}

bool write_domain_archive(const std::filesystem::path& dir, const Domain& domain) {
  if (domain_archive_up_to_date(dir, domain.spec)) return false;
  const auto domain_dir = dir / domain.spec.name;
  write_samples(domain_dir / "train", domain.train);
  write_samples(domain_dir / "test", domain.test);
  atomic_write_file(domain_dir / "manifest.txt",
                    domain_manifest_text(domain.spec));
  return true;
}

Domain read_domain_archive(const std::filesystem::path& dir,
                           const std::string& name) {
  const auto domain_dir = dir / name;
  const std::string manifest = read_file(domain_dir / "manifest.txt");
  Domain domain;
  domain.spec = parse_spec_manifest(manifest);
  if (domain.spec.name != name) {
    throw IoError("archive directory '" + name + "' holds domain '" +
                  domain.spec.name + "'");
  }
  const auto kv = parse_kv(manifest);
  const auto order_it = kv.find("train_order");
  const auto test_it = kv.find("test_order");
  if (order_it == kv.end() || test_it == kv.end()) {
    throw IoError("archive manifest for '" + name + "' is missing split orders");
  }
  const auto load = [&domain_dir](const char* split, const std::vector<int>& ids) {
    std::vector<Sample> samples;
    for (const int id : ids) {
      Sample sample;
      sample.subject_id = id;
      sample.image = read_tensor_file(domain_dir / split / subject_file(id, "image"));
      sample.label = read_tensor_file(domain_dir / split / subject_file(id, "label"));
      samples.push_back(std::move(sample));
    }
    return samples;
  };
  domain.train = load("train", parse_id_list(order_it->second));
  domain.test = load("test", parse_id_list(test_it->second));
  if (domain.train.empty() || domain.test.empty()) {
    throw IoError("archive for '" + name + "' has an empty split");
  }
  return domain;
}

int write_archive(const std::filesystem::path& dir,
                  const std::vector<Domain>& domains) {
  int written = 0;
  for (const auto& domain : domains) {
    written += write_domain_archive(dir, domain) ? 1 : 0;
  }
  return written;
}

std::vector<Domain> read_archive(const std::filesystem::path& dir,
                                 const std::vector<std::string>& names) {
  std::vector<Domain> domains;
  domains.reserve(names.size());
  for (const auto& name : names) {
    domains.push_back(read_domain_archive(dir, name));
  }
  return domains;
}

}  // namespace contseg
