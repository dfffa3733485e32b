#pragma once

// Linear-Gaussian multimodal data: a shared factor g ~ N(0, I_G) drives every
// modality through x_m = A_m g + b_m + noise. Labels bucket the first factor
// coordinate into equally likely classes.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "codevae/elbo.hpp"
#include "codevae/error.hpp"

namespace codevae {

enum class Loading { Random, Identity };

/// Modality `target` replaced by (1 - fraction) * x_source + fraction * eta,
/// eta independent noise with the source's per-dimension variance.
struct Duplication {
  int target = 1;
  int source = 0;
  double fraction = 0.0;
};

struct SyntheticSpec {
  int modalities = 3;
  int factor_dim = 4;
  std::vector<int> dims = {16, 16, 16};
  std::vector<double> noise = {0.5, 0.5, 0.5};
  std::vector<Likelihood> families = {Likelihood::Gaussian, Likelihood::Gaussian, Likelihood::Gaussian};
  std::uint64_t loading_seed = 7;
  Loading loading = Loading::Random;
  int classes = 4;
  std::size_t rows = 2048;
  std::optional<Duplication> duplication;
  /// Append a categorical modality holding the class label.
  bool label_modality = false;

  /// Uniform spec with M modalities of equal width.
  static SyntheticSpec uniform(int modalities, int dim, double noise_std) {
    SyntheticSpec s;
    s.modalities = modalities;
    s.dims.assign(static_cast<std::size_t>(modalities), dim);
    s.noise.assign(static_cast<std::size_t>(modalities), noise_std);
    s.families.assign(static_cast<std::size_t>(modalities), Likelihood::Gaussian);
    return s;
  }

  void validate() const {
    const auto m = static_cast<std::size_t>(modalities);
    if (modalities < 1 || modalities > 15) throw ArgumentError("SyntheticSpec: modalities must be in [1, 15]");
    if (dims.size() != m || noise.size() != m || families.size() != m) {
      throw ArgumentError("SyntheticSpec: per-modality vectors must have length M");
    }
    if (factor_dim < 1) throw ArgumentError("SyntheticSpec: factor_dim must be positive");
    for (std::size_t i = 0; i < m; ++i) {
      if (dims[i] < 1) throw ArgumentError("SyntheticSpec: dims must be positive");
      if (!(noise[i] >= 0.0)) throw ArgumentError("SyntheticSpec: noise std must be >= 0");
      if (families[i] == Likelihood::Categorical) throw ArgumentError("SyntheticSpec: generated modalities are real-valued");
      if (loading == Loading::Identity && dims[i] != factor_dim) {
        throw ArgumentError("SyntheticSpec: identity loading needs dim == factor_dim");
      }
    }
    if (classes < 2 || classes > 10) throw ArgumentError("SyntheticSpec: classes must be in [2, 10]");
    if (rows < 1) throw ArgumentError("SyntheticSpec: rows must be positive");
    if (duplication) {
      const auto& d = *duplication;
      if (d.target < 0 || d.target >= modalities || d.source < 0 || d.source >= modalities || d.target == d.source) {
        throw ArgumentError("SyntheticSpec: duplication indices invalid");
      }
      if (dims[static_cast<std::size_t>(d.target)] != dims[static_cast<std::size_t>(d.source)]) {
        throw ArgumentError("SyntheticSpec: duplicated modalities must share a width");
      }
      if (!(d.fraction >= 0.0 && d.fraction <= 1.0)) throw ArgumentError("SyntheticSpec: fraction must be in [0, 1]");
    }
  }
};

struct ModalityData {
  Likelihood family = Likelihood::Gaussian;
  /// Feature width; number of classes for categorical modalities.
  int dim = 0;
  Matrix values;                // rows x dim (real-valued modalities)
  std::vector<int> categories;  // rows (categorical modalities)

  bool categorical() const noexcept { return family == Likelihood::Categorical; }
};

struct MultimodalDataset {
  std::vector<ModalityData> modalities;
  std::vector<int> labels;
  int classes = 0;
  std::uint64_t seed = 0;

  std::size_t rows() const noexcept { return labels.size(); }
  std::size_t modality_count() const noexcept { return modalities.size(); }

  std::vector<int> dims() const {
    std::vector<int> d;
    for (const auto& m : modalities) d.push_back(m.dim);
    return d;
  }
  std::vector<Likelihood> families() const {
    std::vector<Likelihood> f;
    for (const auto& m : modalities) f.push_back(m.family);
    return f;
  }

  void validate() const {
    if (modalities.empty()) throw ArgumentError("dataset: no modalities");
    for (const auto& m : modalities) {
      const std::size_t n = m.categorical() ? m.categories.size() : static_cast<std::size_t>(m.values.rows());
      if (n != rows()) throw ArgumentError("dataset: modalities differ in row count");
      if (!m.categorical() && m.values.cols() != m.dim) throw ArgumentError("dataset: width mismatch");
      if (m.categorical())
        for (int c : m.categories)
          if (c < 0 || c >= m.dim) throw ArgumentError("dataset: category out of range");
    }
    for (int l : labels)
      if (l < 0 || l >= classes) throw ArgumentError("dataset: label out of range");
  }

  /// Rows [begin, begin + count) as a new dataset.
  MultimodalDataset slice(std::size_t begin, std::size_t count) const {
    if (begin + count > rows()) throw ArgumentError("dataset: slice out of range");
    MultimodalDataset out;
    out.classes = classes;
    out.seed = seed;
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    for (const auto& m : modalities) {
      ModalityData md{m.family, m.dim, {}, {}};
      if (m.categorical()) {
        md.categories.assign(m.categories.begin() + static_cast<std::ptrdiff_t>(begin),
                             m.categories.begin() + static_cast<std::ptrdiff_t>(begin + count));
      } else {
        md.values = m.values.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
      }
      out.modalities.push_back(std::move(md));
    }
    return out;
  }

  friend bool operator==(const MultimodalDataset& a, const MultimodalDataset& b) {
    if (a.labels != b.labels || a.classes != b.classes || a.seed != b.seed) return false;
    if (a.modalities.size() != b.modalities.size()) return false;
    for (std::size_t i = 0; i < a.modalities.size(); ++i) {
      const auto& x = a.modalities[i];
      const auto& y = b.modalities[i];
      if (x.family != y.family || x.dim != y.dim || x.categories != y.categories) return false;
      if (x.values.rows() != y.values.rows() || x.values.cols() != y.values.cols()) return false;
      if (x.values.size() && std::memcmp(x.values.data(), y.values.data(), sizeof(double) * x.values.size()) != 0) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

/// Standard normal quantile by bisection on erfc (thresholds only, not hot).
inline double normal_quantile(double p) {
  double lo = -10.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p) lo = mid; else hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Loading matrix A_m (dim x G) and offset b_m (dim) for each modality.
struct Loadings {
  std::vector<Matrix> a;
  std::vector<Eigen::VectorXd> b;
};

inline Loadings make_loadings(const SyntheticSpec& spec) {
  spec.validate();
  Loadings l;
  std::mt19937_64 rng(spec.loading_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int m = 0; m < spec.modalities; ++m) {
    const int dim = spec.dims[static_cast<std::size_t>(m)];
    Matrix a(dim, spec.factor_dim);
    Eigen::VectorXd b(dim);
    if (spec.loading == Loading::Identity) {
      a.setIdentity();
      b.setZero();
    } else {
      for (int i = 0; i < dim; ++i)
        for (int j = 0; j < spec.factor_dim; ++j) a(i, j) = normal(rng);
      for (int i = 0; i < dim; ++i) b(i) = normal(rng);
    }
    l.a.push_back(std::move(a));
    l.b.push_back(std::move(b));
  }
  return l;
}

/// Seed for the held-out split paired with a training split drawn from `seed`.
inline std::uint64_t held_out_seed(std::uint64_t seed) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline MultimodalDataset generate(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Loadings load = make_loadings(spec);
  const auto n = static_cast<Eigen::Index>(spec.rows);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix g(n, spec.factor_dim);
  for (Eigen::Index r = 0; r < n; ++r)
    for (int j = 0; j < spec.factor_dim; ++j) g(r, j) = normal(rng);

  MultimodalDataset ds;
  ds.classes = spec.classes;
  ds.seed = seed;
  for (int m = 0; m < spec.modalities; ++m) {
    const auto mi = static_cast<std::size_t>(m);
    Matrix x = g * load.a[mi].transpose();
    x.rowwise() += load.b[mi].transpose();
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) += spec.noise[mi] * normal(rng);
    ds.modalities.push_back({spec.families[mi], spec.dims[mi], std::move(x), {}});
  }

  if (spec.duplication) {
    const auto& d = *spec.duplication;
    const auto src = static_cast<std::size_t>(d.source);
    const Matrix& xs = ds.modalities[src].values;
    // Per-dimension variance of the source: row norms of A plus noise.
    const Eigen::VectorXd var = load.a[src].rowwise().squaredNorm().array() + spec.noise[src] * spec.noise[src];
    Matrix x(xs.rows(), xs.cols());
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double eta = std::sqrt(var(c)) * normal(rng);
        x(r, c) = (1.0 - d.fraction) * xs(r, c) + d.fraction * eta;
      }
    ds.modalities[static_cast<std::size_t>(d.target)].values = std::move(x);
  }

  std::vector<double> cuts;
  for (int c = 1; c < spec.classes; ++c) cuts.push_back(detail::normal_quantile(static_cast<double>(c) / spec.classes));
  ds.labels.resize(spec.rows);
  for (Eigen::Index r = 0; r < n; ++r) {
    int label = 0;
    while (label < spec.classes - 1 && g(r, 0) > cuts[static_cast<std::size_t>(label)]) ++label;
    ds.labels[static_cast<std::size_t>(r)] = label;
  }
  if (spec.label_modality) {
    ds.modalities.push_back({Likelihood::Categorical, spec.classes, Matrix{}, ds.labels});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// File format: "CODEMM01", key=value manifest lines closed by "end\n",
// per-modality payloads (f64 row-major, or i32 for categorical), i32 labels,
// then a u64 FNV-1a checksum over the payload bytes. All little endian.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[] = "CODEMM01";

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double x) { put_u64(out, std::bit_cast<std::uint64_t>(x)); }
inline void put_i32(std::string& out, std::int32_t x) {
  const auto v = static_cast<std::uint32_t>(x);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& s, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
  return v;
}
inline double get_f64(const std::string& s, std::size_t pos) { return std::bit_cast<double>(get_u64(s, pos)); }
inline std::int32_t get_i32(const std::string& s, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
  return static_cast<std::int32_t>(v);
}

template <class T>
std::string join(const std::vector<T>& xs, auto&& fmt) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    s += fmt(xs[i]);
  }
  return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string serialize(const MultimodalDataset& ds) {
  ds.validate();
  std::string out(kDatasetMagic, 8);
  out += "modalities=" + std::to_string(ds.modality_count()) + "\n";
  out += "dims=" + detail::join(ds.dims(), [](int d) { return std::to_string(d); }) + "\n";
  out += "likelihoods=" + detail::join(ds.families(), [](Likelihood l) { return to_string(l); }) + "\n";
  out += "rows=" + std::to_string(ds.rows()) + "\n";
  out += "classes=" + std::to_string(ds.classes) + "\n";
  out += "seed=" + std::to_string(ds.seed) + "\n";
  out += "end\n";

  std::string payload;
  for (const auto& m : ds.modalities) {
    if (m.categorical()) {
      for (int c : m.categories) detail::put_i32(payload, c);
    } else {
      for (Eigen::Index r = 0; r < m.values.rows(); ++r)
        for (Eigen::Index c = 0; c < m.values.cols(); ++c) detail::put_f64(payload, m.values(r, c));
    }
  }
  for (int l : ds.labels) detail::put_i32(payload, l);
  out += payload;
  detail::put_u64(out, detail::fnv1a(payload));
  return out;
}

inline MultimodalDataset deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, kDatasetMagic) != 0) throw FormatError("dataset: bad magic");
  std::size_t pos = 8;
  std::map<std::string, std::string> kv;
  while (true) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("dataset: unterminated manifest");
    const std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line == "end") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("dataset: malformed manifest line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }

  MultimodalDataset ds;
  std::size_t modalities = 0, rows = 0;
  std::vector<int> dims;
  std::vector<Likelihood> families;
  try {
    modalities = std::stoul(kv.at("modalities"));
    rows = std::stoul(kv.at("rows"));
    ds.classes = std::stoi(kv.at("classes"));
    ds.seed = std::stoull(kv.at("seed"));
    for (const auto& d : detail::split(kv.at("dims"), ',')) dims.push_back(std::stoi(d));
    for (const auto& f : detail::split(kv.at("likelihoods"), ',')) families.push_back(likelihood_from_string(f));
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("dataset: malformed manifest (") + e.what() + ")");
  }
  if (modalities == 0 || dims.size() != modalities || families.size() != modalities) {
    throw FormatError("dataset: manifest modality count inconsistent");
  }
  for (int d : dims)
    if (d < 1) throw FormatError("dataset: non-positive width");

  std::size_t payload_size = rows * 4;
  for (std::size_t m = 0; m < modalities; ++m) {
    payload_size += families[m] == Likelihood::Categorical ? rows * 4 : rows * static_cast<std::size_t>(dims[m]) * 8;
  }
  if (bytes.size() != pos + payload_size + 8) {
    throw FormatError("dataset: payload size does not match manifest (expected " + std::to_string(payload_size + 8) +
                      " bytes after manifest, found " + std::to_string(bytes.size() - pos) + ")");
  }
  const std::string payload = bytes.substr(pos, payload_size);
  if (detail::fnv1a(payload) != detail::get_u64(bytes, pos + payload_size)) throw FormatError("dataset: checksum mismatch");

  std::size_t p = 0;
  for (std::size_t m = 0; m < modalities; ++m) {
    ModalityData md{families[m], dims[m], {}, {}};
    if (md.categorical()) {
      md.categories.resize(rows);
      for (std::size_t r = 0; r < rows; ++r, p += 4) md.categories[r] = detail::get_i32(payload, p);
    } else {
      md.values.resize(static_cast<Eigen::Index>(rows), dims[m]);
      for (Eigen::Index r = 0; r < md.values.rows(); ++r)
        for (Eigen::Index c = 0; c < md.values.cols(); ++c, p += 8) md.values(r, c) = detail::get_f64(payload, p);
    }
    ds.modalities.push_back(std::move(md));
  }
  ds.labels.resize(rows);
  for (std::size_t r = 0; r < rows; ++r, p += 4) ds.labels[r] = detail::get_i32(payload, p);
  try {
    ds.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
  return ds;
}

inline void save(const MultimodalDataset& ds, const std::string& path) {
  const std::string bytes = serialize(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

inline MultimodalDataset load(const std::string& path) { return deserialize(detail::read_file(path)); }

}  // namespace codevae
