#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "csgd/errors.hpp"
#include "csgd/tensor.hpp"

namespace csgd {

/// Images [n,h,w,c] in [0,1] with integer class labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return size() ? images.numel() / size() : 0; }

  /// Copies the listed samples into a batch.
  std::pair<Tensor, std::vector<int>> batch(const std::vector<std::size_t>& idx) const {
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor x(s);
    std::vector<int> y(idx.size());
    const std::size_t m = sample_numel();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.ptr() + idx[i] * m, m, x.ptr() + i * m);
      y[i] = labels.at(idx[i]);
    }
    return {x, y};
  }

  /// The first n samples (all when n is 0 or exceeds the size).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    auto [x, y] = batch(idx);
    return Dataset{x, y, classes};
  }
};

struct DatasetSplit {
  Dataset train, test;
};

// ---------------------------------------------------------------------------
// IDX files

struct IdxArray {
  std::uint8_t dtype = 0;
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> payload;
};

inline std::size_t idx_element_size(std::uint8_t dtype) {
  switch (dtype) {
    case 0x08:
    case 0x09: return 1;
    case 0x0B: return 2;
    case 0x0C:
    case 0x0D: return 4;
    case 0x0E: return 8;
    default: return 0;
  }
}

inline IdxArray read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open IDX file '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4) throw IoError("'" + path + "': truncated header at byte offset " + std::to_string(bytes.size()));
  if (bytes[0] != 0 || bytes[1] != 0)
    throw IoError("'" + path + "': bad magic at byte offset 0 (expected two zero bytes)");
  IdxArray a;
  a.dtype = bytes[2];
  const std::size_t esize = idx_element_size(a.dtype);
  if (esize == 0) throw IoError("'" + path + "': unknown dtype code " + std::to_string(a.dtype) + " at byte offset 2");
  const std::size_t rank = bytes[3];
  if (rank == 0) throw IoError("'" + path + "': rank 0 at byte offset 3");
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header)
    throw IoError("'" + path + "': truncated dimension list at byte offset " + std::to_string(bytes.size()) +
                  " (header needs " + std::to_string(header) + " bytes)");
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::uint8_t* p = bytes.data() + 4 + 4 * d;
    const std::size_t v = (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | p[3];
    a.dims.push_back(v);
    count *= v;
  }
  const std::size_t need = header + count * esize;
  if (bytes.size() < need)
    throw IoError("'" + path + "': truncated payload at byte offset " + std::to_string(bytes.size()) + ", expected " +
                  std::to_string(need) + " bytes");
  if (bytes.size() > need)
    throw IoError("'" + path + "': " + std::to_string(bytes.size() - need) + " trailing bytes after byte offset " +
                  std::to_string(need));
  a.payload.assign(bytes.begin() + static_cast<long>(header), bytes.end());
  return a;
}

/// Writes an unsigned-byte IDX file.
inline void write_idx(const std::string& path, const std::vector<std::size_t>& dims, const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write IDX file '" + path + "'");
  const std::uint8_t head[4] = {0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
  out.write(reinterpret_cast<const char*>(head), 4);
  for (std::size_t d : dims) {
    const std::uint8_t be[4] = {static_cast<std::uint8_t>(d >> 24), static_cast<std::uint8_t>(d >> 16),
                                static_cast<std::uint8_t>(d >> 8), static_cast<std::uint8_t>(d)};
    out.write(reinterpret_cast<const char*>(be), 4);
  }
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("failed writing IDX file '" + path + "'");
}

/// Paired image ([n,h,w] or [n,h,w,c], unsigned bytes) and label ([n]) files.
/// Pixels are divided by 255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const IdxArray img = read_idx(images_path);
  const IdxArray lab = read_idx(labels_path);
  if (img.dtype != 0x08 || lab.dtype != 0x08) throw IoError("load_idx: only unsigned-byte IDX files are supported");
  if (img.dims.size() != 3 && img.dims.size() != 4)
    throw IoError("'" + images_path + "': expected rank 3 or 4 images, got rank " + std::to_string(img.dims.size()));
  if (lab.dims.size() != 1) throw IoError("'" + labels_path + "': expected rank 1 labels");
  if (img.dims[0] != lab.dims[0])
    throw IoError("image count " + std::to_string(img.dims[0]) + " in '" + images_path + "' does not match label count " +
                  std::to_string(lab.dims[0]) + " in '" + labels_path + "'");
  Shape s = {img.dims[0], img.dims[1], img.dims[2], img.dims.size() == 4 ? img.dims[3] : 1};
  std::vector<float> px(img.payload.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img.payload[i]) / 255.0f;
  Dataset d{Tensor(s, std::move(px)), {}, 0};
  int maxl = 0;
  for (std::uint8_t v : lab.payload) {
    d.labels.push_back(v);
    maxl = std::max<int>(maxl, v);
  }
  d.classes = static_cast<std::size_t>(maxl) + 1;
  return d;
}

/// train-* and t10k-* IDX pairs in one directory; limits of 0 keep everything.
inline DatasetSplit load_mnist(const std::string& dir, std::size_t train_limit = 0, std::size_t test_limit = 0) {
  namespace fs = std::filesystem;
  const fs::path d(dir);
  DatasetSplit s{load_idx((d / "train-images-idx3-ubyte").string(), (d / "train-labels-idx1-ubyte").string()),
                 load_idx((d / "t10k-images-idx3-ubyte").string(), (d / "t10k-labels-idx1-ubyte").string())};
  s.train = s.train.head(train_limit);
  s.test = s.test.head(test_limit);
  const std::size_t classes = std::max<std::size_t>(std::max(s.train.classes, s.test.classes), 10);
  s.train.classes = s.test.classes = classes;
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SynthKind { blobs, rings };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "blobs") return SynthKind::blobs;
  if (s == "rings") return SynthKind::rings;
  throw ValidationError("unknown synthetic dataset '" + s + "' (expected blobs or rings)");
}

struct SynthOptions {
  std::size_t side = 8;  // blobs are side x side x 1 images
  float noise = 0.1f;    // blobs: uniform pixel noise amplitude; rings: radial noise amplitude
};

/// Blobs: one random prototype image per class plus bounded uniform noise.
/// Rings: 2-D points ([n,1,1,2]) on concentric circles of radius class+1.
/// Labels cycle through the classes, so counts are balanced whenever n is a
/// multiple of `classes`; sample order is then shuffled. Train and test
/// samples share the prototypes.
inline DatasetSplit synth_split(SynthKind kind, std::size_t n_train, std::size_t n_test, std::size_t classes,
                                std::uint64_t seed, SynthOptions opt = {}) {
  if (classes < 2) throw ValidationError("synthetic data needs at least 2 classes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const std::size_t m = kind == SynthKind::blobs ? opt.side * opt.side : 2;
  std::vector<std::vector<float>> proto(classes, std::vector<float>(m));
  if (kind == SynthKind::blobs)
    for (auto& p : proto)
      for (float& v : p) v = unit(rng) < 0.5f ? 0.2f : 0.8f;

  auto make = [&](std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Shape s = kind == SynthKind::blobs ? Shape{n, opt.side, opt.side, 1} : Shape{n, 1, 1, 2};
    Dataset d{Tensor(s), std::vector<int>(n), classes};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = i % classes;
      float* x = d.images.ptr() + order[i] * m;
      d.labels[order[i]] = static_cast<int>(label);
      if (kind == SynthKind::blobs) {
        for (std::size_t k = 0; k < m; ++k) x[k] = proto[label][k] + opt.noise * (2.0f * unit(rng) - 1.0f);
      } else {
        const float angle = 6.2831853f * unit(rng);
        const float radius = static_cast<float>(label + 1) + opt.noise * (2.0f * unit(rng) - 1.0f);
        x[0] = radius * std::cos(angle);
        x[1] = radius * std::sin(angle);
      }
    }
    return d;
  };
  DatasetSplit out;
  out.train = make(n_train);
  out.test = make(n_test);
  return out;
}

inline Dataset synth_dataset(SynthKind kind, std::size_t n, std::size_t classes, std::uint64_t seed, SynthOptions opt = {}) {
  return synth_split(kind, n, 0, classes, seed, opt).train;
}

}  // namespace csgd
