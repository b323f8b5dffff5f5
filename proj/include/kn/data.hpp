#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "kn/rng.hpp"
#include "kn/tensor.hpp"

namespace kn {

/// Images are u8, channel-major (count, 3, h, w), labels u16.
struct Dataset {
  std::vector<std::uint8_t> images;
  std::vector<std::uint16_t> labels;
  int count = 0;
  int class_count = 0;
  int h = 32, w = 32;
  std::string name;

  std::size_t image_size() const { return static_cast<std::size_t>(3) * h * w; }
  const std::uint8_t* image(int i) const {
    return images.data() + static_cast<std::size_t>(i) * image_size();
  }

  void validate() const {
    if (static_cast<std::size_t>(count) * image_size() != images.size())
      throw std::runtime_error("dataset: image buffer size mismatch");
    if (static_cast<int>(labels.size()) != count)
      throw std::runtime_error("dataset: label count mismatch");
    for (auto l : labels)
      if (l >= class_count) throw std::runtime_error("dataset: label out of range");
  }
};

enum class CifarKind { Cifar10, Cifar100 };

/// One CIFAR binary file: records of 1 (CIFAR-10) or 2 (CIFAR-100,
/// coarse+fine) label bytes followed by 3072 channel-major pixels.
/// CIFAR-100 keeps the fine label.
inline Dataset load_cifar_binary(const std::string& path, CifarKind kind) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const std::streamsize sz = f.tellg();
  f.seekg(0);
  const int label_bytes = kind == CifarKind::Cifar10 ? 1 : 2;
  const std::streamsize rec = label_bytes + 3072;
  if (sz <= 0) throw std::runtime_error("bad record count");
  if (sz % rec != 0) throw std::runtime_error("truncated record");
  const int count = static_cast<int>(sz / rec);

  Dataset ds;
  ds.count = count;
  ds.class_count = kind == CifarKind::Cifar10 ? 10 : 100;
  ds.name = kind == CifarKind::Cifar10 ? "cifar10" : "cifar100";
  ds.images.resize(static_cast<std::size_t>(count) * 3072);
  ds.labels.resize(count);
  std::vector<std::uint8_t> buf(rec);
  for (int i = 0; i < count; ++i) {
    f.read(reinterpret_cast<char*>(buf.data()), rec);
    if (!f) throw std::runtime_error("truncated record");
    ds.labels[i] = buf[label_bytes - 1];  // fine label is last
    std::copy(buf.begin() + label_bytes, buf.end(),
              ds.images.begin() + static_cast<std::size_t>(i) * 3072);
  }
  ds.validate();
  return ds;
}

inline Dataset concat_datasets(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw std::runtime_error("concat: no parts");
  Dataset out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto& p = parts[i];
    out.images.insert(out.images.end(), p.images.begin(), p.images.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.count += p.count;
  }
  out.validate();
  return out;
}

/// Standard CIFAR-10 binary layout under `dir`: data_batch_{1..5}.bin and
/// test_batch.bin.
inline Dataset load_cifar10_train(const std::string& dir) {
  std::vector<Dataset> parts;
  for (int b = 1; b <= 5; ++b)
    parts.push_back(load_cifar_binary(
        dir + "/data_batch_" + std::to_string(b) + ".bin", CifarKind::Cifar10));
  return concat_datasets(parts);
}

/// Locates a CIFAR-10 training set below KN_DATA_DIR; empty result when the
/// files are not present.
inline std::string cifar10_dir_from_env() {
  const char* env = std::getenv("KN_DATA_DIR");
  if (!env) return {};
  namespace fs = std::filesystem;
  for (const char* sub : {"/cifar-10-batches-bin", ""}) {
    const std::string d = std::string(env) + sub;
    if (fs::exists(d + "/data_batch_1.bin")) return d;
  }
  return {};
}

// ===========================================================================
// Synthetic data
// ===========================================================================

/// Class-separable Gaussian-blob images: each class owns a smooth template,
/// samples add i.i.d. pixel noise. Deterministic under the seed stream.
inline Dataset synth_dataset(int classes, int per_class, int h, int w,
                             Rng rng, double noise = 0.25) {
  if (classes < 1 || per_class < 1) throw std::invalid_argument("synth: sizes");
  Dataset ds;
  ds.count = classes * per_class;
  ds.class_count = classes;
  ds.h = h;
  ds.w = w;
  ds.name = "synth";
  ds.images.resize(static_cast<std::size_t>(ds.count) * ds.image_size());
  ds.labels.resize(ds.count);

  std::vector<double> templates(static_cast<std::size_t>(classes) * 3 * h * w);
  for (int cls = 0; cls < classes; ++cls) {
    Rng trng = rng.split(cls);
    for (int ch = 0; ch < 3; ++ch) {
      double* t = templates.data() +
                  (static_cast<std::size_t>(cls) * 3 + ch) * h * w;
      const int blobs = 3;
      for (int b = 0; b < blobs; ++b) {
        const double cy = trng.next_uniform() * h;
        const double cx = trng.next_uniform() * w;
        const double r = h / 6.0 + trng.next_uniform() * h / 6.0;
        const double amp = trng.next_uniform() * 2.0 - 1.0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            t[y * w + x] += amp * std::exp(-d2 / (2.0 * r * r));
          }
      }
      for (int k = 0; k < h * w; ++k) t[k] = 0.5 + 0.35 * std::tanh(t[k]);
    }
  }

  int idx = 0;
  for (int cls = 0; cls < classes; ++cls) {
    for (int s = 0; s < per_class; ++s, ++idx) {
      Rng srng = rng.split(classes + static_cast<std::uint64_t>(idx));
      ds.labels[idx] = static_cast<std::uint16_t>(cls);
      std::uint8_t* img =
          ds.images.data() + static_cast<std::size_t>(idx) * ds.image_size();
      const double* t = templates.data() +
                        static_cast<std::size_t>(cls) * 3 * h * w;
      for (std::size_t k = 0; k < ds.image_size(); ++k) {
        double v = t[k] + noise * srng.next_normal();
        v = std::clamp(v, 0.0, 1.0);
        img[k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  ds.validate();
  return ds;
}

// ===========================================================================
// Preprocessing and augmentation
// ===========================================================================

struct PreprocessSpec {
  enum class Mode { Div255, MeanStd };
  Mode mode = Mode::Div255;
  std::array<double, 3> mean{0, 0, 0};  // in [0,1] units
  std::array<double, 3> std{1, 1, 1};
  bool pad_crop = false;
  int pad = 4;
  int crop_size = 32;
  bool hflip = false;
  double hflip_prob = 0.5;

  void validate() const {
    for (double s : std)
      if (s <= 0) throw std::invalid_argument("preprocess: std must be > 0");
  }
};

inline PreprocessSpec cifar10_meanstd_preset() {
  PreprocessSpec s;
  s.mode = PreprocessSpec::Mode::MeanStd;
  s.mean = {0.4914, 0.4822, 0.4465};
  s.std = {0.2470, 0.2435, 0.2616};
  return s;
}

inline PreprocessSpec cifar100_meanstd_preset() {
  PreprocessSpec s;
  s.mode = PreprocessSpec::Mode::MeanStd;
  s.mean = {0.5071, 0.4865, 0.4409};
  s.std = {0.2673, 0.2564, 0.3278};
  return s;
}

namespace detail {

template <typename T>
void hflip_plane(T* p, int h, int w) {
  for (int y = 0; y < h; ++y)
    std::reverse(p + static_cast<std::size_t>(y) * w,
                 p + static_cast<std::size_t>(y) * w + w);
}

}  // namespace detail

/// Assembles a preprocessed batch from dataset rows `indices`. When
/// `augment` is set, each sample draws an independent flip decision and
/// pad-then-crop offset from rng.split(position). Labels and row order are
/// never touched.
template <typename T>
Tensor4<T> augment_batch(const Dataset& ds, const std::vector<int>& indices,
                         const PreprocessSpec& spec, Rng rng, bool augment) {
  spec.validate();
  const int out_h = augment && spec.pad_crop ? spec.crop_size : ds.h;
  const int out_w = out_h == ds.h ? ds.w : spec.crop_size;
  Tensor4<T> batch(static_cast<int>(indices.size()), 3, out_h, out_w);

  std::vector<T> img(ds.image_size());
  std::vector<T> padded;
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::uint8_t* src = ds.image(indices[r]);
    for (std::size_t k = 0; k < img.size(); ++k)
      img[k] = static_cast<T>(src[k]) / T(255);

    Rng srng = rng.split(r);
    if (augment && spec.hflip && srng.next_bernoulli(spec.hflip_prob))
      for (int ch = 0; ch < 3; ++ch)
        detail::hflip_plane(img.data() + static_cast<std::size_t>(ch) * ds.h * ds.w,
                            ds.h, ds.w);

    const T* view = img.data();
    int vh = ds.h, vw = ds.w, oy = 0, ox = 0;
    if (augment && spec.pad_crop) {
      const int ph = ds.h + 2 * spec.pad, pw = ds.w + 2 * spec.pad;
      padded.assign(static_cast<std::size_t>(3) * ph * pw, T(0));
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < ds.h; ++y)
          std::copy(img.begin() + (static_cast<std::size_t>(ch) * ds.h + y) * ds.w,
                    img.begin() + (static_cast<std::size_t>(ch) * ds.h + y) * ds.w + ds.w,
                    padded.begin() +
                        (static_cast<std::size_t>(ch) * ph + y + spec.pad) * pw +
                        spec.pad);
      oy = static_cast<int>(srng.next_below(ph - spec.crop_size + 1));
      ox = static_cast<int>(srng.next_below(pw - spec.crop_size + 1));
      view = padded.data();
      vh = ph;
      vw = pw;
    }

    for (int ch = 0; ch < 3; ++ch) {
      const T m = spec.mode == PreprocessSpec::Mode::MeanStd
                      ? static_cast<T>(spec.mean[ch])
                      : T(0);
      const T inv_s = spec.mode == PreprocessSpec::Mode::MeanStd
                          ? static_cast<T>(1.0 / spec.std[ch])
                          : T(1);
      for (int y = 0; y < out_h; ++y) {
        const T* srow = view + (static_cast<std::size_t>(ch) * vh + y + oy) * vw + ox;
        T* drow = batch.row(static_cast<int>(r), ch, y);
        for (int x = 0; x < out_w; ++x) drow[x] = (srow[x] - m) * inv_s;
      }
    }
  }
  return batch;
}

inline std::vector<int> batch_labels(const Dataset& ds,
                                     const std::vector<int>& indices) {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i)
    out[i] = static_cast<int>(ds.labels[indices[i]]);
  return out;
}

// ===========================================================================
// Partitioning
// ===========================================================================

/// Disjoint client shards, each restricted to exactly `labels_per_client`
/// distinct labels; every sample is assigned.
inline std::vector<std::vector<int>> noniid_partition(const Dataset& ds,
                                                      int clients,
                                                      int labels_per_client,
                                                      Rng rng) {
  const int C = ds.class_count;
  if (clients < 1 || labels_per_client < 1 || labels_per_client > C ||
      static_cast<long long>(clients) * labels_per_client < C)
    throw std::invalid_argument("infeasible label assignment");

  std::vector<int> perm(C);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = C - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.next_below(i + 1)]);

  // deal label slots to clients consecutively; slots wrap around the
  // shuffled class list, so each client sees distinct labels
  std::vector<std::vector<int>> holders(C);  // class -> holder clients in order
  for (int k = 0; k < clients; ++k)
    for (int j = 0; j < labels_per_client; ++j)
      holders[perm[(k * labels_per_client + j) % C]].push_back(k);

  std::vector<std::vector<int>> by_class(C);
  for (int i = 0; i < ds.count; ++i) by_class[ds.labels[i]].push_back(i);
  for (int c = 0; c < C; ++c) {
    auto& v = by_class[c];
    Rng crng = rng.split(100 + c);
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
      std::swap(v[i], v[crng.next_below(i + 1)]);
  }

  std::vector<std::vector<int>> shards(clients);
  for (int c = 0; c < C; ++c) {
    const auto& hs = holders[c];
    const auto& v = by_class[c];
    const std::size_t per = v.size() / hs.size();
    std::size_t extra = v.size() % hs.size();
    std::size_t pos = 0;
    for (std::size_t q = 0; q < hs.size(); ++q) {
      std::size_t take = per + (q < extra ? 1 : 0);
      for (std::size_t t = 0; t < take; ++t) shards[hs[q]].push_back(v[pos++]);
    }
  }
  return shards;
}

/// Stratified index sample: `per_class` rows from every class, fixed seed.
inline std::vector<int> stratified_subset(const Dataset& ds, int per_class,
                                          Rng rng) {
  std::vector<std::vector<int>> by_class(ds.class_count);
  for (int i = 0; i < ds.count; ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<int> out;
  for (int c = 0; c < ds.class_count; ++c) {
    auto& v = by_class[c];
    if (static_cast<int>(v.size()) < per_class)
      throw std::invalid_argument("stratified_subset: class too small");
    Rng crng = rng.split(c);
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
      std::swap(v[i], v[crng.next_below(i + 1)]);
    out.insert(out.end(), v.begin(), v.begin() + per_class);
  }
  return out;
}

/// Restriction of a dataset to an index list (copies rows).
inline Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
  Dataset out;
  out.count = static_cast<int>(indices.size());
  out.class_count = ds.class_count;
  out.h = ds.h;
  out.w = ds.w;
  out.name = ds.name + "-subset";
  out.images.resize(out.count * out.image_size());
  out.labels.resize(out.count);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy(ds.image(indices[i]), ds.image(indices[i]) + ds.image_size(),
              out.images.begin() + i * out.image_size());
    out.labels[i] = ds.labels[indices[i]];
  }
  out.validate();
  return out;
}

}  // namespace kn
