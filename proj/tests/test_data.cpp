#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "overlap/dataset.hpp"

using overlap::LabeledDataset;
using overlap::load_cifar_binary;
using overlap::load_idx;
using overlap::OverlapSpec;
using overlap::partition_overlap;
using overlap::PartitionResult;
using overlap::Split;
using overlap::synth_blobs;

namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  const fs::path dir = fs::temp_directory_path() / "overlap_data_test";
  fs::create_directories(dir);
  return dir;
}

void write_u32_be(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_idx_pair(const fs::path& images, const fs::path& labels,
                    const std::vector<unsigned char>& pixels,
                    const std::vector<unsigned char>& label_bytes, std::uint32_t rows,
                    std::uint32_t cols, std::uint32_t image_magic = 0x00000803u,
                    std::uint32_t label_magic = 0x00000801u,
                    std::uint32_t label_count_override = 0xffffffffu) {
  std::ofstream img(images, std::ios::binary);
  write_u32_be(img, image_magic);
  write_u32_be(img, static_cast<std::uint32_t>(label_bytes.size()));
  write_u32_be(img, rows);
  write_u32_be(img, cols);
  img.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));

  std::ofstream lab(labels, std::ios::binary);
  write_u32_be(lab, label_magic);
  write_u32_be(lab, label_count_override == 0xffffffffu
                        ? static_cast<std::uint32_t>(label_bytes.size())
                        : label_count_override);
  lab.write(reinterpret_cast<const char*>(label_bytes.data()),
            static_cast<std::streamsize>(label_bytes.size()));
}

}  // namespace

TEST_CASE("idx loader parses a canonical-sized file") {
  const fs::path dir = test_dir();
  const std::uint32_t n = 10000;
  std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * 28 * 28, 0);
  pixels[0] = 255;  // first pixel of first image
  std::vector<unsigned char> labels(n, 0);
  for (std::uint32_t i = 0; i < n; ++i) labels[i] = static_cast<unsigned char>(i % 10);
  write_idx_pair(dir / "m.img", dir / "m.lab", pixels, labels, 28, 28);

  const LabeledDataset ds = load_idx((dir / "m.img").string(), (dir / "m.lab").string(),
                                     Split::test);
  REQUIRE(ds.size() == 10000);
  REQUIRE(ds.inputs.shape() == std::vector<std::size_t>{10000, 1, 28, 28});
  REQUIRE(ds.inputs.at(0) == 1.0f);  // byte 255 scales to exactly 1
  REQUIRE(ds.inputs.at(1) == 0.0f);
  REQUIRE(ds.labels[3] == 3);
  REQUIRE(ds.class_universe == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("idx loader rejects bad magic, truncation, and count mismatch") {
  const fs::path dir = test_dir();
  std::vector<unsigned char> pixels(2 * 4 * 4, 7);
  std::vector<unsigned char> labels = {1, 0};

  write_idx_pair(dir / "bad.img", dir / "bad.lab", pixels, labels, 4, 4, 0x00000803u,
                 0x00000805u);
  REQUIRE_THROWS_AS(load_idx((dir / "bad.img").string(), (dir / "bad.lab").string()),
                    overlap::FormatError);

  write_idx_pair(dir / "badimg.img", dir / "badimg.lab", pixels, labels, 4, 4, 0x12345678u);
  REQUIRE_THROWS_AS(load_idx((dir / "badimg.img").string(), (dir / "badimg.lab").string()),
                    overlap::FormatError);

  std::vector<unsigned char> short_pixels(2 * 4 * 4 - 5, 7);
  write_idx_pair(dir / "trunc.img", dir / "trunc.lab", short_pixels, labels, 4, 4);
  REQUIRE_THROWS_AS(load_idx((dir / "trunc.img").string(), (dir / "trunc.lab").string()),
                    overlap::FormatError);

  write_idx_pair(dir / "count.img", dir / "count.lab", pixels, labels, 4, 4, 0x00000803u,
                 0x00000801u, 3);
  REQUIRE_THROWS_AS(load_idx((dir / "count.img").string(), (dir / "count.lab").string()),
                    overlap::FormatError);

  REQUIRE_THROWS_AS(load_idx((dir / "missing.img").string(), (dir / "missing.lab").string()),
                    overlap::FormatError);
}

TEST_CASE("cifar loader handles both record variants") {
  const fs::path dir = test_dir();
  {
    std::ofstream out(dir / "cifar.bin", std::ios::binary);
    for (int r = 0; r < 10; ++r) {
      std::vector<unsigned char> record(3073, static_cast<unsigned char>(r));
      record[0] = static_cast<unsigned char>(r == 3 ? 7 : r % 10);
      record[1] = 255;
      out.write(reinterpret_cast<const char*>(record.data()), 3073);
    }
  }
  const LabeledDataset ds = load_cifar_binary({(dir / "cifar.bin").string()});
  REQUIRE(ds.size() == 10);
  REQUIRE(ds.inputs.shape() == std::vector<std::size_t>{10, 3, 32, 32});
  REQUIRE(ds.labels[3] == 7);
  REQUIRE(ds.inputs.at(0) == 1.0f);  // first pixel of record 0 was byte 255

  {
    std::ofstream out(dir / "cifar100.bin", std::ios::binary);
    std::vector<unsigned char> record(3074, 0);
    record[0] = 11;  // coarse
    record[1] = 42;  // fine, the one that must be used
    out.write(reinterpret_cast<const char*>(record.data()), 3074);
  }
  const LabeledDataset fine = load_cifar_binary({(dir / "cifar100.bin").string()});
  REQUIRE(fine.size() == 1);
  REQUIRE(fine.labels[0] == 42);

  {
    std::ofstream out(dir / "cifar_trunc.bin", std::ios::binary);
    std::vector<unsigned char> bytes(3073 * 2 - 9, 1);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  REQUIRE_THROWS_AS(load_cifar_binary({(dir / "cifar_trunc.bin").string()}),
                    overlap::FormatError);
}

TEST_CASE("synth blobs: zero spread collapses each class onto its center") {
  const auto [train, test] = synth_blobs(4, 6, 3, 8, 0.0f, 42);
  REQUIRE(train.size() == 24);
  REQUIRE(test.size() == 12);
  for (int c = 0; c < 4; ++c) {
    // all samples of one class are identical and inside the center box
    std::vector<float> first;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (train.labels[i] != c) continue;
      std::vector<float> row(train.inputs.values().begin() + i * 8,
                             train.inputs.values().begin() + (i + 1) * 8);
      if (first.empty()) {
        first = row;
        for (float v : row) {
          REQUIRE(v >= 0.2f);
          REQUIRE(v <= 0.8f);
        }
      } else {
        REQUIRE(row == first);
      }
    }
  }
}

TEST_CASE("synth blobs are deterministic in the seed") {
  const auto [a_train, a_test] = synth_blobs(5, 10, 4, 12, 0.05f, 7);
  const auto [b_train, b_test] = synth_blobs(5, 10, 4, 12, 0.05f, 7);
  REQUIRE(a_train.inputs.values() == b_train.inputs.values());
  REQUIRE(a_test.inputs.values() == b_test.inputs.values());
  const auto [c_train, c_test] = synth_blobs(5, 10, 4, 12, 0.05f, 8);
  REQUIRE(a_train.inputs.values() != c_train.inputs.values());
}

// multinomial logistic regression trained with plain gradient descent,
// independent of the library's model/training path
namespace {

double logistic_oracle_accuracy(const LabeledDataset& train, const LabeledDataset& test,
                                int classes, int dim) {
  std::vector<double> w(static_cast<std::size_t>(classes) * dim, 0.0);
  std::vector<double> b(classes, 0.0);
  const double lr = 0.5;
  for (int epoch = 0; epoch < 60; ++epoch) {
    std::vector<double> gw(w.size(), 0.0), gb(b.size(), 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      std::vector<double> z(classes, 0.0);
      for (int c = 0; c < classes; ++c)
        for (int d = 0; d < dim; ++d)
          z[c] += w[c * dim + d] * train.inputs.at(i * dim + d);
      for (int c = 0; c < classes; ++c) z[c] += b[c];
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double& v : z) {
        v = std::exp(v - mx);
        sum += v;
      }
      for (int c = 0; c < classes; ++c) {
        const double p = z[c] / sum - (train.labels[i] == c ? 1.0 : 0.0);
        for (int d = 0; d < dim; ++d) gw[c * dim + d] += p * train.inputs.at(i * dim + d);
        gb[c] += p;
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i] / train.size();
    for (int c = 0; c < classes; ++c) b[c] -= lr * gb[c] / train.size();
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    int best = 0;
    double best_z = -1e300;
    for (int c = 0; c < classes; ++c) {
      double z = b[c];
      for (int d = 0; d < dim; ++d) z += w[c * dim + d] * test.inputs.at(i * dim + d);
      if (z > best_z) {
        best_z = z;
        best = c;
      }
    }
    if (best == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / test.size();
}

}  // namespace

TEST_CASE("synth blobs at spread 0.05 are linearly separable") {
  const auto [train, test] = synth_blobs(10, 60, 20, 64, 0.05f, 3);
  REQUIRE(logistic_oracle_accuracy(train, test, 10, 64) >= 0.99);
}

namespace {

struct PartitionViews {
  std::set<std::size_t> s_ids, v_ids;
  std::set<std::size_t> s_shared, v_shared, s_excl, v_excl;
};

PartitionViews views(const LabeledDataset& train, const PartitionResult& r) {
  PartitionViews pv;
  pv.s_ids.insert(r.surrogate_sample_ids.begin(), r.surrogate_sample_ids.end());
  pv.v_ids.insert(r.victim_sample_ids.begin(), r.victim_sample_ids.end());
  const std::set<int> shared(r.shared_class_ids.begin(), r.shared_class_ids.end());
  for (std::size_t id : r.surrogate_sample_ids) {
    (shared.count(train.labels[id]) ? pv.s_shared : pv.s_excl).insert(id);
  }
  for (std::size_t id : r.victim_sample_ids) {
    (shared.count(train.labels[id]) ? pv.v_shared : pv.v_excl).insert(id);
  }
  return pv;
}

}  // namespace

TEST_CASE("partition invariants hold over the full (o, p) grid") {
  const auto [train, test] = synth_blobs(10, 100, 10, 4, 0.03f, 17);
  for (int o = 0; o <= 5; ++o) {
    for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      OverlapSpec spec{10, o, p, 1234 + static_cast<std::uint64_t>(o * 10 + int(p * 4))};
      const PartitionResult r = partition_overlap(train, test, spec);
      INFO("o=" << o << " p=" << p);

      // class bookkeeping
      REQUIRE(static_cast<int>(r.shared_class_ids.size()) == o);
      REQUIRE(static_cast<int>(r.surrogate_exclusive.size()) == 5 - o);
      REQUIRE(static_cast<int>(r.victim_exclusive.size()) == 5 - o);
      REQUIRE(static_cast<int>(r.unused_classes.size()) == o);
      std::set<int> all;
      for (int c : r.shared_class_ids) all.insert(c);
      for (int c : r.surrogate_exclusive) all.insert(c);
      for (int c : r.victim_exclusive) all.insert(c);
      for (int c : r.unused_classes) all.insert(c);
      REQUIRE(all.size() == 10);

      // constant-size construction: 5 classes x floor(100/2)
      REQUIRE(r.surrogate_train.size() == 250);
      REQUIRE(r.victim_train.size() == 250);
      REQUIRE(r.surrogate_sample_ids.size() == 250);
      REQUIRE(r.victim_sample_ids.size() == 250);

      const PartitionViews pv = views(train, r);
      REQUIRE(pv.s_ids.size() == 250);  // no duplicates within one model
      REQUIRE(pv.v_ids.size() == 250);

      // per shared class: each model holds 50 and shares exactly round(p*50)
      const std::size_t expect_common =
          static_cast<std::size_t>(std::floor(p * 50.0 + 0.5));
      for (int c : r.shared_class_ids) {
        std::set<std::size_t> s_c, v_c;
        for (std::size_t id : pv.s_shared)
          if (train.labels[id] == c) s_c.insert(id);
        for (std::size_t id : pv.v_shared)
          if (train.labels[id] == c) v_c.insert(id);
        REQUIRE(s_c.size() == 50);
        REQUIRE(v_c.size() == 50);
        std::vector<std::size_t> common;
        std::set_intersection(s_c.begin(), s_c.end(), v_c.begin(), v_c.end(),
                              std::back_inserter(common));
        REQUIRE(common.size() == expect_common);
      }

      // exclusive-class samples never overlap across models
      std::vector<std::size_t> excl_overlap;
      std::set_intersection(pv.s_excl.begin(), pv.s_excl.end(), pv.v_excl.begin(),
                            pv.v_excl.end(), std::back_inserter(excl_overlap));
      REQUIRE(excl_overlap.empty());

      // shared test carries only shared classes from the test split
      const std::set<int> shared(r.shared_class_ids.begin(), r.shared_class_ids.end());
      REQUIRE(r.shared_test.size() == static_cast<std::size_t>(o) * 10);
      for (int y : r.shared_test.labels) REQUIRE(shared.count(y) == 1);

      // labels re-indexed densely through the recorded maps
      REQUIRE(r.surrogate_train.class_universe == std::vector<int>{0, 1, 2, 3, 4});
      for (std::size_t i = 0; i < r.surrogate_train.size(); ++i) {
        const int original = train.labels[r.surrogate_sample_ids[i]];
        REQUIRE(r.surrogate_train.labels[i] == r.surrogate_class_index.at(original));
      }
      for (std::size_t i = 0; i < r.victim_train.size(); ++i) {
        const int original = train.labels[r.victim_sample_ids[i]];
        REQUIRE(r.victim_train.labels[i] == r.victim_class_index.at(original));
      }
    }
  }
}

TEST_CASE("partition formula cell: o=4, p=0.5") {
  const auto [train, test] = synth_blobs(10, 100, 5, 4, 0.03f, 5);
  const PartitionResult r = partition_overlap(train, test, {10, 4, 0.5, 99});
  REQUIRE(r.surrogate_train.size() == 250);
  REQUIRE(r.victim_train.size() == 250);
  std::set<std::size_t> s(r.surrogate_sample_ids.begin(), r.surrogate_sample_ids.end());
  std::set<std::size_t> v(r.victim_sample_ids.begin(), r.victim_sample_ids.end());
  std::vector<std::size_t> common;
  std::set_intersection(s.begin(), s.end(), v.begin(), v.end(), std::back_inserter(common));
  REQUIRE(common.size() == 4 * 25);
  REQUIRE(r.unused_classes.size() == 4);
}

TEST_CASE("full overlap gives identical datasets, zero data overlap keeps classes") {
  const auto [train, test] = synth_blobs(10, 40, 5, 4, 0.03f, 11);

  const PartitionResult full = partition_overlap(train, test, {10, 5, 1.0, 21});
  REQUIRE(full.surrogate_sample_ids == full.victim_sample_ids);
  REQUIRE(full.surrogate_train.inputs.values() == full.victim_train.inputs.values());
  REQUIRE(full.surrogate_train.labels == full.victim_train.labels);

  const PartitionResult none = partition_overlap(train, test, {10, 5, 0.0, 21});
  std::set<std::size_t> s(none.surrogate_sample_ids.begin(), none.surrogate_sample_ids.end());
  std::set<std::size_t> v(none.victim_sample_ids.begin(), none.victim_sample_ids.end());
  std::vector<std::size_t> common;
  std::set_intersection(s.begin(), s.end(), v.begin(), v.end(), std::back_inserter(common));
  REQUIRE(common.empty());
  REQUIRE(none.surrogate_class_index == none.victim_class_index);
}

TEST_CASE("partition is deterministic and bounded by the source set") {
  const auto [train, test] = synth_blobs(6, 30, 5, 4, 0.03f, 13);
  const OverlapSpec spec{6, 2, 0.75, 4242};
  const PartitionResult a = partition_overlap(train, test, spec);
  const PartitionResult b = partition_overlap(train, test, spec);
  REQUIRE(a.surrogate_sample_ids == b.surrogate_sample_ids);
  REQUIRE(a.victim_sample_ids == b.victim_sample_ids);
  REQUIRE(a.shared_class_ids == b.shared_class_ids);

  for (std::size_t id : a.surrogate_sample_ids) REQUIRE(id < train.size());
  for (std::size_t id : a.victim_sample_ids) REQUIRE(id < train.size());
}

TEST_CASE("partition rejects invalid specs") {
  const auto [train, test] = synth_blobs(10, 10, 4, 4, 0.03f, 5);
  REQUIRE_THROWS_AS(partition_overlap(train, test, {10, 6, 0.5, 1}), overlap::ShapeError);
  REQUIRE_THROWS_AS(partition_overlap(train, test, {9, 4, 0.5, 1}), overlap::ShapeError);
  REQUIRE_THROWS_AS(partition_overlap(train, test, {10, 4, 1.5, 1}), overlap::ShapeError);

  // one class starved below 2 samples
  std::vector<std::size_t> keep;
  int dropped = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i] == 0 && dropped++ < 9) continue;
    keep.push_back(i);
  }
  const LabeledDataset tiny = overlap::subset(train, keep);
  REQUIRE_THROWS_AS(partition_overlap(tiny, test, {10, 4, 0.5, 1}), overlap::ShapeError);
}

TEST_CASE("partition audit json records the full assignment") {
  const auto [train, test] = synth_blobs(6, 20, 4, 4, 0.03f, 23);
  const OverlapSpec spec{6, 2, 0.5, 77};
  const PartitionResult r = partition_overlap(train, test, spec);
  const nlohmann::json j = overlap::partition_audit_json(spec, r);
  REQUIRE(j["total_classes"] == 6);
  REQUIRE(j["shared_classes"] == 2);
  REQUIRE(j["surrogate_sample_ids"].size() == r.surrogate_sample_ids.size());
  REQUIRE(j["shared_class_ids"].size() == 2);
}
