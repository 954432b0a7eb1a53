#ifndef OVERLAP_HARNESS_HPP
#define OVERLAP_HARNESS_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "overlap/attacks.hpp"
#include "overlap/common.hpp"
#include "overlap/dataset.hpp"
#include "overlap/model.hpp"
#include "overlap/rng.hpp"
#include "overlap/training.hpp"

namespace overlap {

// Full experiment grid: (shared classes) x (shared data fraction) x reps.
struct GridSpec {
  DatasetSpec dataset;
  std::vector<int> shared_class_counts;      // all >= 1; o = 0 cells are not evaluable
  std::vector<double> shared_data_fractions; // ascending by convention
  int repetitions = 5;
  ArchSpec arch;  // num_classes is overridden per cell to N/2
  TrainConfig surrogate_train;
  TrainConfig victim_train;
  AttackConfig attack;
  AttackKind attack_kind = AttackKind::pgd;
  std::uint64_t master_seed = 0;
  bool twin_seeds = false;  // force shared init/shuffle seeds for S and V

  void validate() const {
    if (repetitions < 1) throw ShapeError("grid needs repetitions >= 1");
    if (shared_class_counts.empty() || shared_data_fractions.empty()) {
      throw ShapeError("grid needs at least one shared-class count and one data fraction");
    }
    for (int o : shared_class_counts) {
      if (o < 1) throw ShapeError("grid shared-class counts must be >= 1 (o = 0 is not evaluable)");
    }
    for (double p : shared_data_fractions) {
      if (!(p >= 0.0 && p <= 1.0)) throw ShapeError("shared data fractions must lie in [0, 1]");
    }
    attack.validate();
    surrogate_train.validate();
    victim_train.validate();
  }
};

struct RepRecord {
  double clean_acc = 0.0;      // victim on clean shared test data
  double attacked_acc = 0.0;   // victim on the transferred adversarial set
  double success = 0.0;        // clean_acc - attacked_acc
  double whitebox_success = 0.0;  // same difference measured on the surrogate
  std::uint64_t cell_seed = 0;
};

struct CellResult {
  int shared_classes = 0;
  double data_fraction = 0.0;
  std::vector<RepRecord> reps;
  double mean_success = 0.0;
  double std_success = 0.0;  // sample (n-1) std over reps; 0 for a single rep
};

struct PearsonResult {
  double r = 0.0;
  bool defined = false;
};

struct GridResult {
  GridSpec spec;
  std::vector<CellResult> cells;  // sorted by (shared_classes, data_fraction)
  PearsonResult r_shared_classes;  // corr(cell mean success, o)
  PearsonResult r_shared_data;     // corr(cell mean success, p)
  std::string tool_version = kVersion;
};

// Sample Pearson correlation; undefined when either input has zero variance.
inline PearsonResult pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) {
    throw ShapeError("pearson length mismatch: " + std::to_string(xs.size()) + " vs " +
                     std::to_string(ys.size()));
  }
  if (xs.size() < 2) throw ShapeError("pearson needs at least 2 points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  PearsonResult out;
  if (sxx == 0.0 || syy == 0.0) return out;
  out.r = sxy / std::sqrt(sxx * syy);
  out.defined = true;
  return out;
}

inline double sample_std(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

enum class GridAxis { shared_classes, data_fraction };

// Standard deviation of cell mean success within each group along one axis:
// grouping by shared_classes yields one value per o (spread across p), and
// vice versa. Returns (group key, std) pairs sorted by key.
inline std::vector<std::pair<double, double>> aggregate_variance(
    const std::vector<CellResult>& cells, GridAxis group_by) {
  std::vector<std::pair<double, double>> out;
  std::vector<double> keys;
  for (const CellResult& c : cells) {
    const double k =
        group_by == GridAxis::shared_classes ? static_cast<double>(c.shared_classes) : c.data_fraction;
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  std::sort(keys.begin(), keys.end());
  for (double k : keys) {
    std::vector<double> members;
    for (const CellResult& c : cells) {
      const double ck = group_by == GridAxis::shared_classes ? static_cast<double>(c.shared_classes)
                                                             : c.data_fraction;
      if (ck == k) members.push_back(c.mean_success);
    }
    out.push_back({k, sample_std(members)});
  }
  return out;
}

namespace detail {

struct CellSeeds {
  std::uint64_t partition, s_init, s_shuffle, v_init, v_shuffle, attack;
};

inline CellSeeds derive_cell_seeds(std::uint64_t master, int o, int p_index, int rep_index,
                                   bool twin) {
  const std::uint64_t base = mix_seed({master, static_cast<std::uint64_t>(o),
                                       static_cast<std::uint64_t>(p_index),
                                       static_cast<std::uint64_t>(rep_index)});
  CellSeeds s;
  s.partition = mix_seed({base, 1});
  s.s_init = mix_seed({base, 2});
  s.s_shuffle = mix_seed({base, 3});
  s.v_init = twin ? s.s_init : mix_seed({base, 4});
  s.v_shuffle = twin ? s.s_shuffle : mix_seed({base, 5});
  s.attack = mix_seed({base, 6});
  return s;
}

inline std::vector<int> map_labels(const std::vector<int>& labels, const std::map<int, int>& index) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = index.at(labels[i]);
  return out;
}

}  // namespace detail

inline Model train_model_for_cell(const ArchSpec& arch, std::uint64_t init_seed,
                                  const LabeledDataset& ds, const TrainConfig& cfg) {
  return train(build_model(arch, init_seed), ds, cfg).model;
}

// One repetition of one grid cell: partition, train surrogate and victim,
// attack the surrogate on the shared test set, transfer the perturbed inputs
// unchanged to the victim, and score per the success metric
// (clean accuracy minus attacked accuracy).
inline RepRecord run_cell(const GridSpec& grid, const LabeledDataset& train,
                          const LabeledDataset& test, int o, int p_index, int rep_index) {
  const double p = grid.shared_data_fractions.at(static_cast<std::size_t>(p_index));
  const detail::CellSeeds seeds =
      detail::derive_cell_seeds(grid.master_seed, o, p_index, rep_index, grid.twin_seeds);

  OverlapSpec ospec;
  ospec.total_classes = static_cast<int>(train.class_universe.size());
  ospec.shared_classes = o;
  ospec.shared_data_fraction = p;
  ospec.partition_seed = seeds.partition;
  const PartitionResult part = partition_overlap(train, test, ospec);
  if (part.shared_test.size() == 0) {
    throw ShapeError("shared test set is empty for o=" + std::to_string(o));
  }

  ArchSpec arch = grid.arch;
  arch.num_classes = static_cast<std::size_t>(ospec.total_classes / 2);

  TrainConfig s_cfg = grid.surrogate_train;
  s_cfg.shuffle_seed = seeds.s_shuffle;
  TrainConfig v_cfg = grid.victim_train;
  v_cfg.shuffle_seed = seeds.v_shuffle;
  const Model surrogate = train_model_for_cell(arch, seeds.s_init, part.surrogate_train, s_cfg);
  const Model victim = train_model_for_cell(arch, seeds.v_init, part.victim_train, v_cfg);

  AttackConfig a_cfg = grid.attack;
  a_cfg.seed = seeds.attack;
  const std::vector<int> y_surrogate =
      detail::map_labels(part.shared_test.labels, part.surrogate_class_index);
  const AdversarialBatch adv =
      run_attack(grid.attack_kind, surrogate, part.shared_test.inputs, y_surrogate, a_cfg);

  LabeledDataset attacked = part.shared_test;
  attacked.inputs = adv.perturbed;

  RepRecord rec;
  rec.cell_seed = seeds.partition;
  rec.clean_acc = evaluate(victim, part.shared_test, part.victim_class_index);
  rec.attacked_acc = evaluate(victim, attacked, part.victim_class_index);
  rec.success = rec.clean_acc - rec.attacked_acc;
  const double s_clean = evaluate(surrogate, part.shared_test, part.surrogate_class_index);
  const double s_attacked = evaluate(surrogate, attacked, part.surrogate_class_index);
  rec.whitebox_success = s_clean - s_attacked;
  return rec;
}

// Runs every (o, p, rep) task, optionally across threads. Seeds are derived
// per task, so results are independent of scheduling; cells are sorted by
// (o, p) before aggregation.
inline GridResult run_grid(const GridSpec& grid, std::size_t threads = 1) {
  grid.validate();
  const auto [train_ds, test_ds] = load_dataset(grid.dataset);

  struct Task {
    int o;
    int p_index;
    int rep;
  };
  std::vector<Task> tasks;
  for (int o : grid.shared_class_counts)
    for (int pi = 0; pi < static_cast<int>(grid.shared_data_fractions.size()); ++pi)
      for (int r = 0; r < grid.repetitions; ++r) tasks.push_back({o, pi, r});

  std::vector<RepRecord> records(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::string first_error;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      try {
        records[i] = run_cell(grid, train_ds, test_ds, t.o, t.p_index, t.rep);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (first_error.empty()) {
          first_error = "cell o=" + std::to_string(t.o) + " p=" +
                        std::to_string(grid.shared_data_fractions[t.p_index]) + " rep=" +
                        std::to_string(t.rep) + ": " + e.what();
        }
      }
    }
  };

  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (!first_error.empty()) throw NumericError("grid failed at " + first_error);

  GridResult result;
  result.spec = grid;
  for (int o : grid.shared_class_counts) {
    for (int pi = 0; pi < static_cast<int>(grid.shared_data_fractions.size()); ++pi) {
      CellResult cell;
      cell.shared_classes = o;
      cell.data_fraction = grid.shared_data_fractions[pi];
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].o == o && tasks[i].p_index == pi) cell.reps.push_back(records[i]);
      }
      std::vector<double> successes;
      for (const RepRecord& r : cell.reps) successes.push_back(r.success);
      double mean = 0.0;
      for (double s : successes) mean += s;
      cell.mean_success = mean / static_cast<double>(successes.size());
      cell.std_success = sample_std(successes);
      result.cells.push_back(std::move(cell));
    }
  }
  std::sort(result.cells.begin(), result.cells.end(), [](const CellResult& a, const CellResult& b) {
    if (a.shared_classes != b.shared_classes) return a.shared_classes < b.shared_classes;
    return a.data_fraction < b.data_fraction;
  });

  std::vector<double> os, ps, means;
  for (const CellResult& c : result.cells) {
    os.push_back(static_cast<double>(c.shared_classes));
    ps.push_back(c.data_fraction);
    means.push_back(c.mean_success);
  }
  if (means.size() >= 2) {
    result.r_shared_classes = pearson(os, means);
    result.r_shared_data = pearson(ps, means);
  }
  return result;
}

}  // namespace overlap

#endif  // OVERLAP_HARNESS_HPP
