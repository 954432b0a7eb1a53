#ifndef OVERLAP_DATASET_HPP
#define OVERLAP_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "overlap/common.hpp"
#include "overlap/rng.hpp"
#include "overlap/tensor.hpp"

namespace overlap {

enum class Split { train, test };

struct LabeledDataset {
  Tensor inputs;            // [n, ...], values in [0, 1]
  std::vector<int> labels;  // one class id per row
  std::vector<int> class_universe;  // sorted distinct ids
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_elements() const { return size() == 0 ? 0 : inputs.size() / size(); }

  void validate() const {
    if (inputs.shape().empty() || inputs.shape()[0] != labels.size()) {
      throw ShapeError("dataset inputs " + shape_to_string(inputs.shape()) + " vs " +
                       std::to_string(labels.size()) + " labels");
    }
    for (int y : labels) {
      if (!std::binary_search(class_universe.begin(), class_universe.end(), y)) {
        throw ShapeError("label " + std::to_string(y) + " not in class universe");
      }
    }
    for (float v : inputs.values()) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw ShapeError("dataset input value " + std::to_string(v) + " outside [0, 1]");
      }
    }
  }
};

// Rows of `ds` selected by index, in the given order.
inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& ids) {
  const std::size_t per = ds.sample_elements();
  std::vector<std::size_t> shape = ds.inputs.shape();
  shape[0] = ids.size();
  std::vector<float> values(ids.size() * per);
  std::vector<int> labels(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float* src = ds.inputs.values().data() + ids[i] * per;
    std::copy(src, src + per, values.data() + i * per);
    labels[i] = ds.labels[ids[i]];
  }
  LabeledDataset out;
  out.inputs = Tensor::from_values(std::move(shape), std::move(values));
  out.labels = std::move(labels);
  out.class_universe = ds.class_universe;
  out.split = ds.split;
  return out;
}

inline std::vector<int> distinct_sorted(const std::vector<int>& labels) {
  std::vector<int> u = labels;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  return u;
}

namespace detail {

inline std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("truncated file while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

// IDX image/label pair (big-endian headers, pixel bytes scaled by 1/255).
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               Split split = Split::train) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw FormatError("cannot open " + images_path);
  if (detail::read_u32_be(img, "image magic") != 0x00000803u) {
    throw FormatError(images_path + ": bad IDX image magic, expected 0x00000803");
  }
  const std::uint32_t n = detail::read_u32_be(img, "image count");
  const std::uint32_t rows = detail::read_u32_be(img, "image rows");
  const std::uint32_t cols = detail::read_u32_be(img, "image cols");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw FormatError("cannot open " + labels_path);
  if (detail::read_u32_be(lab, "label magic") != 0x00000801u) {
    throw FormatError(labels_path + ": bad IDX label magic, expected 0x00000801");
  }
  const std::uint32_t ln = detail::read_u32_be(lab, "label count");
  if (ln != n) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(ln) + " labels");
  }

  std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * rows * cols);
  img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(img.gcount()) != pixels.size()) {
    throw FormatError(images_path + ": truncated image data");
  }
  std::vector<unsigned char> raw_labels(n);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(lab.gcount()) != raw_labels.size()) {
    throw FormatError(labels_path + ": truncated label data");
  }

  std::vector<float> values(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i)
    values[i] = static_cast<float>(pixels[i]) / 255.0f;
  LabeledDataset ds;
  ds.inputs = Tensor::from_values({n, 1, rows, cols}, std::move(values));
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  ds.class_universe = distinct_sorted(ds.labels);
  ds.split = split;
  return ds;
}

// CIFAR binary batches: 3073-byte records (label + 3072 CHW pixels), or the
// 3074-byte coarse+fine variant where the fine label is used. The variant is
// detected per file from its length.
inline LabeledDataset load_cifar_binary(const std::vector<std::string>& paths,
                                        Split split = Split::train) {
  std::vector<float> values;
  std::vector<int> labels;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::size_t len = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::size_t record = 0, label_bytes = 0;
    if (len > 0 && len % 3073 == 0) {
      record = 3073;
      label_bytes = 1;
    } else if (len > 0 && len % 3074 == 0) {
      record = 3074;
      label_bytes = 2;
    } else {
      throw FormatError(path + ": length " + std::to_string(len) +
                        " is not a multiple of the 3073- or 3074-byte record size");
    }
    const std::size_t count = len / record;
    std::vector<unsigned char> buf(record);
    for (std::size_t r = 0; r < count; ++r) {
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(record));
      if (!in) throw FormatError(path + ": truncated record");
      labels.push_back(static_cast<int>(buf[label_bytes - 1]));  // fine label is the last one
      for (std::size_t i = label_bytes; i < record; ++i)
        values.push_back(static_cast<float>(buf[i]) / 255.0f);
    }
  }
  LabeledDataset ds;
  ds.inputs = Tensor::from_values({labels.size(), 3, 32, 32}, std::move(values));
  ds.labels = std::move(labels);
  ds.class_universe = distinct_sorted(ds.labels);
  ds.split = split;
  return ds;
}

// Gaussian blobs around class centers drawn uniformly in [0.2, 0.8]^dim,
// clamped to the unit box. Deterministic in seed.
inline std::pair<LabeledDataset, LabeledDataset> synth_blobs(int num_classes, int per_class_train,
                                                             int per_class_test, int dim,
                                                             float spread, std::uint64_t seed) {
  if (num_classes < 2) throw ShapeError("synth_blobs needs num_classes >= 2");
  if (dim < 2) throw ShapeError("synth_blobs needs dim >= 2");
  Rng center_rng(mix_seed({seed, 0x63656e74}));
  std::vector<float> centers(static_cast<std::size_t>(num_classes) * dim);
  for (float& v : centers) v = center_rng.uniform(0.2f, 0.8f);

  auto make = [&](int per_class, Split split, std::uint64_t tag) {
    LabeledDataset ds;
    std::vector<float> values;
    values.reserve(static_cast<std::size_t>(num_classes) * per_class * dim);
    for (int c = 0; c < num_classes; ++c) {
      Rng rng(mix_seed({seed, tag, static_cast<std::uint64_t>(c)}));
      for (int i = 0; i < per_class; ++i) {
        for (int d = 0; d < dim; ++d) {
          float v = centers[static_cast<std::size_t>(c) * dim + d] + rng.normal(0.0f, spread);
          values.push_back(std::clamp(v, 0.0f, 1.0f));
        }
        ds.labels.push_back(c);
      }
    }
    ds.inputs = Tensor::from_values(
        {static_cast<std::size_t>(num_classes) * per_class, static_cast<std::size_t>(dim)},
        std::move(values));
    for (int c = 0; c < num_classes; ++c) ds.class_universe.push_back(c);
    ds.split = split;
    return ds;
  };
  return {make(per_class_train, Split::train, 0x7472), make(per_class_test, Split::test, 0x7465)};
}

// Where a grid run gets its data from.
struct DatasetSpec {
  enum class Kind { synth_blobs, idx, cifar };
  Kind kind = Kind::synth_blobs;
  // synth_blobs
  int num_classes = 10;
  int per_class_train = 100;
  int per_class_test = 20;
  int dim = 64;
  float spread = 0.05f;
  std::uint64_t seed = 1;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // cifar
  std::vector<std::string> train_files, test_files;
};

inline std::pair<LabeledDataset, LabeledDataset> load_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetSpec::Kind::synth_blobs:
      return synth_blobs(spec.num_classes, spec.per_class_train, spec.per_class_test, spec.dim,
                         spec.spread, spec.seed);
    case DatasetSpec::Kind::idx:
      return {load_idx(spec.train_images, spec.train_labels, Split::train),
              load_idx(spec.test_images, spec.test_labels, Split::test)};
    case DatasetSpec::Kind::cifar:
      return {load_cifar_binary(spec.train_files, Split::train),
              load_cifar_binary(spec.test_files, Split::test)};
  }
  throw ShapeError("unhandled dataset kind");
}

// One (shared classes, shared data) cell of the threat model.
struct OverlapSpec {
  int total_classes = 0;           // N, even; each model gets N/2 output classes
  int shared_classes = 0;          // o in [0, N/2]
  double shared_data_fraction = 0; // p in [0, 1]
  std::uint64_t partition_seed = 0;

  void validate() const {
    if (total_classes < 2 || total_classes % 2 != 0) {
      throw ShapeError("overlap spec needs an even class count >= 2, got " +
                       std::to_string(total_classes));
    }
    if (shared_classes < 0 || shared_classes > total_classes / 2) {
      throw ShapeError("shared class count " + std::to_string(shared_classes) +
                       " outside [0, " + std::to_string(total_classes / 2) + "]");
    }
    if (!(shared_data_fraction >= 0.0 && shared_data_fraction <= 1.0)) {
      throw ShapeError("shared data fraction must lie in [0, 1]");
    }
  }
};

struct PartitionResult {
  LabeledDataset surrogate_train;  // labels re-indexed to [0, N/2)
  LabeledDataset victim_train;     // labels re-indexed to [0, N/2)
  LabeledDataset shared_test;      // original labels, shared classes only

  std::vector<int> shared_class_ids;       // Y^O
  std::vector<int> surrogate_exclusive;    // Y^S \ Y^O
  std::vector<int> victim_exclusive;       // Y^V \ Y^O
  std::vector<int> unused_classes;

  std::map<int, int> surrogate_class_index;  // original id -> dense index
  std::map<int, int> victim_class_index;

  std::vector<std::size_t> surrogate_sample_ids;  // indices into the source train set
  std::vector<std::size_t> victim_sample_ids;
  std::vector<std::size_t> shared_test_sample_ids;
};

// Splits classes and per-class samples so that both models train on the same
// number of samples while the shared-class/shared-data cell is hit exactly:
// each shared class contributes floor(m/2) samples per model with
// round(p * floor(m/2)) ids common to both.
inline PartitionResult partition_overlap(const LabeledDataset& train, const LabeledDataset& test,
                                         const OverlapSpec& spec) {
  spec.validate();
  const int n_classes = spec.total_classes;
  if (static_cast<int>(train.class_universe.size()) != n_classes) {
    throw ShapeError("train set has " + std::to_string(train.class_universe.size()) +
                     " classes, overlap spec expects " + std::to_string(n_classes));
  }
  const int half = n_classes / 2;
  const int o = spec.shared_classes;

  std::vector<std::size_t> empty;
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  std::map<int, int> class_pos;
  for (int i = 0; i < n_classes; ++i) class_pos[train.class_universe[i]] = i;
  for (std::size_t i = 0; i < train.size(); ++i) by_class[class_pos.at(train.labels[i])].push_back(i);
  for (int c = 0; c < n_classes; ++c) {
    if (by_class[c].size() < 2) {
      throw ShapeError("class " + std::to_string(train.class_universe[c]) +
                       " has fewer than 2 train samples");
    }
  }

  // Class roles from one seeded shuffle: o shared, then surrogate-exclusive,
  // then victim-exclusive, remainder unused.
  std::vector<int> order = train.class_universe;
  Rng class_rng(mix_seed({spec.partition_seed, 0x636c7300}));
  class_rng.shuffle(order);

  PartitionResult res;
  res.shared_class_ids.assign(order.begin(), order.begin() + o);
  res.surrogate_exclusive.assign(order.begin() + o, order.begin() + half);
  res.victim_exclusive.assign(order.begin() + half, order.begin() + (2 * half - o));
  res.unused_classes.assign(order.begin() + (2 * half - o), order.end());

  auto pick = [&](int class_id, std::uint64_t tag) {
    std::vector<std::size_t> ids = by_class[class_pos.at(class_id)];
    Rng rng(mix_seed({spec.partition_seed, tag, static_cast<std::uint64_t>(class_id)}));
    rng.shuffle(ids);
    return ids;
  };

  for (int c : res.shared_class_ids) {
    const std::vector<std::size_t> ids = pick(c, 0x73686172);
    const std::size_t h = ids.size() / 2;
    const std::size_t common = static_cast<std::size_t>(
        std::floor(spec.shared_data_fraction * static_cast<double>(h) + 0.5));
    // surrogate: positions [0, h); victim: the first `common` of those plus
    // the next h - common fresh positions
    for (std::size_t i = 0; i < h; ++i) res.surrogate_sample_ids.push_back(ids[i]);
    for (std::size_t i = 0; i < common; ++i) res.victim_sample_ids.push_back(ids[i]);
    for (std::size_t i = 0; i < h - common; ++i) res.victim_sample_ids.push_back(ids[h + i]);
  }
  for (int c : res.surrogate_exclusive) {
    const std::vector<std::size_t> ids = pick(c, 0x73657863);
    for (std::size_t i = 0; i < ids.size() / 2; ++i) res.surrogate_sample_ids.push_back(ids[i]);
  }
  for (int c : res.victim_exclusive) {
    const std::vector<std::size_t> ids = pick(c, 0x76657863);
    for (std::size_t i = 0; i < ids.size() / 2; ++i) res.victim_sample_ids.push_back(ids[i]);
  }

  // Dense per-model label maps, ordered by original class id.
  auto build_index = [](std::vector<int> classes) {
    std::sort(classes.begin(), classes.end());
    std::map<int, int> index;
    for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = static_cast<int>(i);
    return index;
  };
  std::vector<int> s_classes = res.shared_class_ids;
  s_classes.insert(s_classes.end(), res.surrogate_exclusive.begin(), res.surrogate_exclusive.end());
  std::vector<int> v_classes = res.shared_class_ids;
  v_classes.insert(v_classes.end(), res.victim_exclusive.begin(), res.victim_exclusive.end());
  res.surrogate_class_index = build_index(std::move(s_classes));
  res.victim_class_index = build_index(std::move(v_classes));

  auto materialize = [&](const std::vector<std::size_t>& ids, const std::map<int, int>& index) {
    LabeledDataset ds = subset(train, ids);
    for (int& y : ds.labels) y = index.at(y);
    ds.class_universe.clear();
    for (int i = 0; i < half; ++i) ds.class_universe.push_back(i);
    return ds;
  };
  res.surrogate_train = materialize(res.surrogate_sample_ids, res.surrogate_class_index);
  res.victim_train = materialize(res.victim_sample_ids, res.victim_class_index);

  for (std::size_t i = 0; i < test.size(); ++i) {
    if (std::find(res.shared_class_ids.begin(), res.shared_class_ids.end(), test.labels[i]) !=
        res.shared_class_ids.end()) {
      res.shared_test_sample_ids.push_back(i);
    }
  }
  res.shared_test = subset(test, res.shared_test_sample_ids);
  res.shared_test.class_universe = res.shared_class_ids;
  std::sort(res.shared_test.class_universe.begin(), res.shared_test.class_universe.end());
  return res;
}

// Audit record: class roles, label maps, and exact sample-id sets.
inline nlohmann::json partition_audit_json(const OverlapSpec& spec, const PartitionResult& res) {
  nlohmann::json j;
  j["total_classes"] = spec.total_classes;
  j["shared_classes"] = spec.shared_classes;
  j["shared_data_fraction"] = spec.shared_data_fraction;
  j["partition_seed"] = spec.partition_seed;
  j["shared_class_ids"] = res.shared_class_ids;
  j["surrogate_exclusive"] = res.surrogate_exclusive;
  j["victim_exclusive"] = res.victim_exclusive;
  j["unused_classes"] = res.unused_classes;
  j["surrogate_class_index"] = res.surrogate_class_index;
  j["victim_class_index"] = res.victim_class_index;
  j["surrogate_sample_ids"] = res.surrogate_sample_ids;
  j["victim_sample_ids"] = res.victim_sample_ids;
  j["shared_test_sample_ids"] = res.shared_test_sample_ids;
  return j;
}

}  // namespace overlap

#endif  // OVERLAP_DATASET_HPP
