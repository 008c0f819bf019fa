#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "anchorlab/common.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

struct LabeledDataset {
  Matrix features;                // n x m
  std::vector<int> labels;        // observed labels in [0, k)
  std::vector<int> clean_labels;  // pre-noise labels; empty when not tracked
  int k = 0;
  nlohmann::json provenance = nlohmann::json::array();

  long n() const { return static_cast<long>(features.rows()); }
  int m() const { return static_cast<int>(features.cols()); }
};

inline std::vector<long> class_counts(const LabeledDataset& d) {
  std::vector<long> counts(d.k, 0);
  for (int y : d.labels) {
    if (y < 0 || y >= d.k) throw LabelError("label " + std::to_string(y) + " outside [0,k)");
    ++counts[y];
  }
  return counts;
}

inline void validate_dataset(const LabeledDataset& d) {
  if (static_cast<long>(d.labels.size()) != d.n())
    throw ShapeError("labels/features row mismatch");
  if (!d.clean_labels.empty() && d.clean_labels.size() != d.labels.size())
    throw ShapeError("clean_labels length mismatch");
  if (d.k < 1) throw LabelError("dataset needs k >= 1");
  class_counts(d);
}

struct BlobSpec {
  int k = 2;
  int m = 2;
  long per_class = 100;
  double center_scale = 5.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

// k gaussian blobs with means drawn uniformly on the sphere of radius
// center_scale and isotropic noise. Labels are clean by construction.
inline LabeledDataset synth_blobs(const BlobSpec& spec) {
  if (spec.k < 2) throw DomainError("need k >= 2 blobs");
  if (spec.m < 1) throw DomainError("need m >= 1 input dims");
  if (spec.per_class < 1) throw CountError("per_class must be >= 1");
  if (spec.center_scale < 0 || spec.noise_sigma < 0)
    throw DomainError("center_scale and noise_sigma must be nonnegative");

  Rng rng(spec.seed);
  Matrix means(spec.k, spec.m);
  for (int c = 0; c < spec.k; ++c) {
    double nrm = 0.0;
    Eigen::RowVectorXd dir(spec.m);
    do {
      for (int j = 0; j < spec.m; ++j) dir(j) = rng.normal();
      nrm = dir.norm();
    } while (nrm < kZeroNormEps);
    means.row(c) = spec.center_scale * dir / nrm;
  }

  LabeledDataset d;
  d.k = spec.k;
  const long n = spec.per_class * spec.k;
  d.features.resize(n, spec.m);
  d.labels.resize(n);
  long row = 0;
  for (int c = 0; c < spec.k; ++c) {
    for (long i = 0; i < spec.per_class; ++i, ++row) {
      for (int j = 0; j < spec.m; ++j)
        d.features(row, j) = means(c, j) + spec.noise_sigma * rng.normal();
      d.labels[row] = c;
    }
  }
  d.clean_labels = d.labels;
  d.provenance.push_back({{"op", "synth_blobs"},
                          {"k", spec.k},
                          {"m", spec.m},
                          {"per_class", spec.per_class},
                          {"center_scale", spec.center_scale},
                          {"noise_sigma", spec.noise_sigma},
                          {"seed", spec.seed}});
  return d;
}

namespace detail {

// keep rows listed in `keep` (ascending), preserving original order
inline LabeledDataset subset_rows(const LabeledDataset& d, const std::vector<long>& keep) {
  LabeledDataset out;
  out.k = d.k;
  out.provenance = d.provenance;
  out.features.resize(static_cast<long>(keep.size()), d.m());
  out.labels.resize(keep.size());
  if (!d.clean_labels.empty()) out.clean_labels.resize(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.features.row(static_cast<long>(i)) = d.features.row(keep[i]);
    out.labels[i] = d.labels[keep[i]];
    if (!d.clean_labels.empty()) out.clean_labels[i] = d.clean_labels[keep[i]];
  }
  return out;
}

inline std::vector<std::vector<long>> rows_by_class(const LabeledDataset& d) {
  std::vector<std::vector<long>> idx(d.k);
  for (long i = 0; i < d.n(); ++i) idx[d.labels[i]].push_back(i);
  return idx;
}

// choose `want` of the class's rows without replacement, original order kept
inline std::vector<long> sample_rows(std::vector<long> rows, long want, Rng& rng) {
  rng.shuffle(rows);
  rows.resize(static_cast<std::size_t>(want));
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace detail

/**
 * Exponential long-tail profile over a balanced input: class i keeps
 * n_i = round(n_max * rho^(-i / (k-1))) samples, so class 0 stays at n_max
 * and class k-1 drops to n_max / rho.
 */
inline LabeledDataset apply_longtail(const LabeledDataset& d, double rho, std::uint64_t seed) {
  validate_dataset(d);
  if (rho < 1) throw DomainError("imbalance ratio must be >= 1");
  auto counts = class_counts(d);
  const long n_max = *std::max_element(counts.begin(), counts.end());
  for (long c : counts)
    if (c != n_max) throw DomainError("long-tail profile expects a balanced input dataset");
  const int k = d.k;
  if (k < 2) throw DomainError("need k >= 2");

  Rng rng(seed);
  auto by_class = detail::rows_by_class(d);
  std::vector<long> keep;
  std::vector<long> new_counts(k);
  for (int i = 0; i < k; ++i) {
    const long ni = std::llround(n_max * std::pow(rho, -static_cast<double>(i) / (k - 1)));
    if (ni < 1)
      throw EmptyClassError("class " + std::to_string(i) + " would keep 0 samples at rho=" +
                            std::to_string(rho));
    new_counts[i] = ni;
    auto rows = detail::sample_rows(by_class[i], ni, rng);
    keep.insert(keep.end(), rows.begin(), rows.end());
  }
  std::sort(keep.begin(), keep.end());
  LabeledDataset out = detail::subset_rows(d, keep);
  out.provenance.push_back(
      {{"op", "longtail"}, {"rho", rho}, {"seed", seed}, {"counts", new_counts}});
  return out;
}

// step profile: the last ceil(minority_fraction * k) classes keep
// round(n_max / rho) samples each, the rest stay at n_max
inline LabeledDataset apply_step(const LabeledDataset& d, double rho, double minority_fraction,
                                 std::uint64_t seed) {
  validate_dataset(d);
  if (rho < 1) throw DomainError("imbalance ratio must be >= 1");
  if (minority_fraction <= 0 || minority_fraction >= 1)
    throw DomainError("minority_fraction must lie in (0, 1)");
  auto counts = class_counts(d);
  const long n_max = *std::max_element(counts.begin(), counts.end());
  for (long c : counts)
    if (c != n_max) throw DomainError("step profile expects a balanced input dataset");
  const int k = d.k;
  const int minority = static_cast<int>(std::ceil(minority_fraction * k));
  const long n_min = std::llround(n_max / rho);
  if (n_min < 1) throw EmptyClassError("minority classes would keep 0 samples");

  Rng rng(seed);
  auto by_class = detail::rows_by_class(d);
  std::vector<long> keep;
  std::vector<long> new_counts(k);
  for (int i = 0; i < k; ++i) {
    const long ni = (i >= k - minority) ? n_min : n_max;
    new_counts[i] = ni;
    auto rows = detail::sample_rows(by_class[i], ni, rng);
    keep.insert(keep.end(), rows.begin(), rows.end());
  }
  std::sort(keep.begin(), keep.end());
  LabeledDataset out = detail::subset_rows(d, keep);
  out.provenance.push_back({{"op", "step"},
                            {"rho", rho},
                            {"minority_fraction", minority_fraction},
                            {"seed", seed},
                            {"counts", new_counts}});
  return out;
}

// each label flips with probability eta to a class drawn uniformly from the
// other k-1; clean labels are preserved alongside
inline LabeledDataset apply_symmetric_noise(const LabeledDataset& d, double eta,
                                            std::uint64_t seed) {
  validate_dataset(d);
  if (eta < 0 || eta >= 1) throw RateError("noise rate must lie in [0, 1)");
  if (d.k < 2) throw DomainError("need k >= 2 to flip labels");
  LabeledDataset out = d;
  if (out.clean_labels.empty()) out.clean_labels = d.labels;
  Rng rng(seed);
  for (long i = 0; i < out.n(); ++i) {
    if (rng.uniform() < eta) {
      const int y = out.labels[i];
      const int r = static_cast<int>(rng.below(d.k - 1));
      out.labels[i] = r >= y ? r + 1 : r;
    }
  }
  out.provenance.push_back({{"op", "symmetric_noise"}, {"eta", eta}, {"seed", seed}});
  return out;
}

// class-conditional flips: samples whose clean label is a map source move to
// the mapped target with probability eta, everything else is untouched
inline LabeledDataset apply_asymmetric_noise(const LabeledDataset& d, double eta,
                                             const std::vector<std::pair<int, int>>& class_map,
                                             std::uint64_t seed) {
  validate_dataset(d);
  if (eta < 0 || eta >= 1) throw RateError("noise rate must lie in [0, 1)");
  std::vector<int> target(d.k, -1);
  for (auto [src, dst] : class_map) {
    if (src < 0 || src >= d.k || dst < 0 || dst >= d.k)
      throw MapError("class map entry " + std::to_string(src) + "->" + std::to_string(dst) +
                     " outside [0," + std::to_string(d.k) + ")");
    if (src == dst) throw MapError("class map may not map a class to itself");
    if (target[src] != -1) throw MapError("duplicate class map source " + std::to_string(src));
    target[src] = dst;
  }
  LabeledDataset out = d;
  if (out.clean_labels.empty()) out.clean_labels = d.labels;
  Rng rng(seed);
  for (long i = 0; i < out.n(); ++i) {
    const int base = out.clean_labels[i];
    if (target[base] != -1 && rng.uniform() < eta) out.labels[i] = target[base];
  }
  nlohmann::json map_json = nlohmann::json::array();
  for (auto [src, dst] : class_map) map_json.push_back({src, dst});
  out.provenance.push_back(
      {{"op", "asymmetric_noise"}, {"eta", eta}, {"map", map_json}, {"seed", seed}});
  return out;
}

// max class count / min class count over observed labels
inline double imbalance_ratio(const LabeledDataset& d) {
  auto counts = class_counts(d);
  long mx = 0, mn = std::numeric_limits<long>::max();
  for (int c = 0; c < d.k; ++c) {
    mx = std::max(mx, counts[c]);
    mn = std::min(mn, counts[c]);
    if (counts[c] == 0)
      throw EmptyClassError("class " + std::to_string(c) + " has no samples");
  }
  return static_cast<double>(mx) / static_cast<double>(mn);
}

// stratified split; round(eval_fraction * count) rows per class go to eval
inline std::pair<LabeledDataset, LabeledDataset> split_stratified(const LabeledDataset& d,
                                                                  double eval_fraction,
                                                                  std::uint64_t seed) {
  validate_dataset(d);
  if (eval_fraction <= 0 || eval_fraction >= 1)
    throw DomainError("eval_fraction must lie in (0, 1)");
  Rng rng(seed);
  auto by_class = detail::rows_by_class(d);
  std::vector<long> eval_rows, train_rows;
  for (int c = 0; c < d.k; ++c) {
    auto rows = by_class[c];
    const long count = static_cast<long>(rows.size());
    long n_eval = std::llround(eval_fraction * count);
    n_eval = std::clamp(n_eval, 0L, count > 1 ? count - 1 : 0L);
    rng.shuffle(rows);
    eval_rows.insert(eval_rows.end(), rows.begin(), rows.begin() + n_eval);
    train_rows.insert(train_rows.end(), rows.begin() + n_eval, rows.end());
  }
  std::sort(eval_rows.begin(), eval_rows.end());
  std::sort(train_rows.begin(), train_rows.end());
  LabeledDataset train = detail::subset_rows(d, train_rows);
  LabeledDataset eval = detail::subset_rows(d, eval_rows);
  train.provenance.push_back(
      {{"op", "split"}, {"role", "train"}, {"eval_fraction", eval_fraction}, {"seed", seed}});
  eval.provenance.push_back(
      {{"op", "split"}, {"role", "eval"}, {"eval_fraction", eval_fraction}, {"seed", seed}});
  return {std::move(train), std::move(eval)};
}

// ---- loaders --------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& f, const std::string& path, std::size_t offset) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4)
    throw FormatError(path + ": truncated at byte offset " + std::to_string(offset));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

// IDX image/label pair (the MNIST container format); pixels scaled to [0,1]
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw IoError("cannot open " + images_path);
  const std::uint32_t im_magic = detail::read_be32(imf, images_path, 0);
  if (im_magic != 0x00000803u)
    throw FormatError(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
  const std::uint32_t n = detail::read_be32(imf, images_path, 4);
  const std::uint32_t rows = detail::read_be32(imf, images_path, 8);
  const std::uint32_t cols = detail::read_be32(imf, images_path, 12);
  const std::size_t pixels = std::size_t(n) * rows * cols;
  std::vector<unsigned char> buf(pixels);
  imf.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
  if (static_cast<std::size_t>(imf.gcount()) != pixels)
    throw FormatError(images_path + ": truncated at byte offset " +
                      std::to_string(16 + imf.gcount()));

  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw IoError("cannot open " + labels_path);
  const std::uint32_t lb_magic = detail::read_be32(lbf, labels_path, 0);
  if (lb_magic != 0x00000801u)
    throw FormatError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
  const std::uint32_t ln = detail::read_be32(lbf, labels_path, 4);
  if (ln != n)
    throw FormatError(labels_path + ": has " + std::to_string(ln) + " labels for " +
                      std::to_string(n) + " images");
  std::vector<unsigned char> lbuf(ln);
  lbf.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(ln));
  if (static_cast<std::size_t>(lbf.gcount()) != ln)
    throw FormatError(labels_path + ": truncated at byte offset " +
                      std::to_string(8 + lbf.gcount()));

  LabeledDataset d;
  const long mdim = static_cast<long>(rows) * cols;
  d.features.resize(n, mdim);
  for (std::uint32_t i = 0; i < n; ++i)
    for (long j = 0; j < mdim; ++j)
      d.features(i, j) = static_cast<double>(buf[std::size_t(i) * mdim + j]) / 255.0;
  d.labels.resize(n);
  int kmax = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    d.labels[i] = lbuf[i];
    kmax = std::max(kmax, d.labels[i]);
  }
  d.k = kmax + 1;
  d.provenance.push_back(
      {{"op", "load_idx"}, {"images", images_path}, {"labels", labels_path}});
  return d;
}

// CSV with a header row; the column named "label" carries integer classes,
// every other column is a numeric feature
inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty file");
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = s.find(',', start);
      if (comma == std::string::npos) {
        cells.push_back(s.substr(start));
        break;
      }
      cells.push_back(s.substr(start, comma - start));
      start = comma + 1;
    }
    return cells;
  };
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split(line);
  long label_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == "label") label_col = static_cast<long>(i);
  if (label_col < 0) throw FormatError(path + ": line 1: no 'label' column in header");

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  long lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != header.size())
      throw FormatError(path + ": line " + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " cells, got " +
                        std::to_string(cells.size()));
    std::vector<double> feat;
    feat.reserve(cells.size() - 1);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const char* cs = cells[i].c_str();
      char* end = nullptr;
      const double v = std::strtod(cs, &end);
      if (end == cs || *end != '\0')
        throw FormatError(path + ": line " + std::to_string(lineno) + ": cell '" + cells[i] +
                          "' is not numeric");
      if (static_cast<long>(i) == label_col) {
        if (v != std::floor(v) || v < 0)
          throw FormatError(path + ": line " + std::to_string(lineno) +
                            ": label must be a nonnegative integer");
        labels.push_back(static_cast<int>(v));
      } else {
        feat.push_back(v);
      }
    }
    rows.push_back(std::move(feat));
  }
  if (rows.empty()) throw FormatError(path + ": no data rows");

  LabeledDataset d;
  d.features.resize(static_cast<long>(rows.size()), static_cast<long>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      d.features(static_cast<long>(i), static_cast<long>(j)) = rows[i][j];
  d.labels = std::move(labels);
  d.k = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.provenance.push_back({{"op", "load_csv"}, {"path", path}});
  return d;
}

// ---- bundle: data.bin + labels.bin [+ clean_labels.bin] + meta.json -------

namespace detail {

inline void write_i32(const std::string& path, const std::vector<int>& v) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (int x : v) {
    std::int32_t le = x;
    f.write(reinterpret_cast<const char*>(&le), 4);
  }
  if (!f) throw IoError("short write to " + path);
}

inline std::vector<int> read_i32(const std::string& path, std::size_t count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<int> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::int32_t le;
    f.read(reinterpret_cast<char*>(&le), 4);
    if (f.gcount() != 4) throw FormatError(path + ": truncated");
    v[i] = le;
  }
  return v;
}

}  // namespace detail

inline void save_bundle(const LabeledDataset& d, const std::string& dir) {
  validate_dataset(d);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  detail::write_doubles(dir + "/data.bin", d.features.data(),
                        static_cast<std::size_t>(d.n()) * d.m());
  detail::write_i32(dir + "/labels.bin", d.labels);
  if (!d.clean_labels.empty()) detail::write_i32(dir + "/clean_labels.bin", d.clean_labels);
  nlohmann::json meta;
  meta["n"] = d.n();
  meta["m"] = d.m();
  meta["k"] = d.k;
  meta["counts"] = class_counts(d);
  meta["has_clean_labels"] = !d.clean_labels.empty();
  meta["provenance"] = d.provenance;
  std::ofstream mf(dir + "/meta.json", std::ios::trunc);
  if (!mf) throw IoError("cannot open " + dir + "/meta.json for writing");
  mf << meta.dump(2) << "\n";
}

inline LabeledDataset load_bundle(const std::string& dir) {
  std::ifstream mf(dir + "/meta.json");
  if (!mf) throw IoError("cannot open " + dir + "/meta.json");
  nlohmann::json meta;
  try {
    mf >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir + "/meta.json: " + e.what());
  }
  LabeledDataset d;
  const long n = meta.at("n").get<long>();
  const int m = meta.at("m").get<int>();
  d.k = meta.at("k").get<int>();
  if (n < 0 || m < 1 || d.k < 1) throw FormatError(dir + "/meta.json: bad dimensions");
  d.features.resize(n, m);
  detail::read_doubles(dir + "/data.bin", d.features.data(), static_cast<std::size_t>(n) * m);
  d.labels = detail::read_i32(dir + "/labels.bin", static_cast<std::size_t>(n));
  if (meta.value("has_clean_labels", false))
    d.clean_labels = detail::read_i32(dir + "/clean_labels.bin", static_cast<std::size_t>(n));
  if (meta.contains("provenance")) d.provenance = meta["provenance"];
  validate_dataset(d);
  return d;
}

}  // namespace anchorlab
