#pragma once

// Experiment configs, the three studies (method comparison, first-order
// study, scaling laws) and report emission.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dq/discquant.hpp"
#include "dq/incoherence.hpp"
#include "dq/lmwalk.hpp"
#include "dq/speclab.hpp"
#include "dq/toymodel.hpp"

namespace dq {

inline constexpr const char* kArtifactVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

enum class ExperimentKind { Comparison, FirstOrder, Scaling };

struct GridBlock {
  std::vector<int> bits = {2, 3};
  std::size_t groupsize = 16;  // kPerTensor = one scale per tensor
};

struct DataBlock {
  std::size_t heldout_sequences = 256;
  std::size_t seq_len = 8;
  /// Fraction of each training batch drawn from uniform random tokens
  /// instead of the teacher.
  double uniform_mix = 0.0;
};

struct IncoherenceBlock {
  std::vector<bool> modes = {false};  // which arms to run: off and/or on
  std::uint64_t seed = 0;
};

struct FirstOrderBlock {
  std::vector<int> bits = {3, 4, 5, 6, 7, 8};
  std::size_t sequences = 32;
  std::vector<std::string> methods = {"rtn", "discquant", "zero"};
};

struct ScalingBlock {
  bool run_falpha = true;
  SpectrumSpec falpha_spec;
  std::vector<double> alphas = {1.25, 2.5};
  std::vector<std::size_t> falpha_m_grid = {32, 64, 128, 256, 512};
  int falpha_trials = 20;

  bool run_generalization = true;
  SpectrumSpec gen_spec = {.n = 1024, .lambda1 = 1.0, .alpha = 2.0};
  std::vector<std::size_t> gen_m_grid = {8, 16, 32, 64};
  int gen_trials = 20;
  GenRounding gen_rounding = GenRounding::Vertex;
};

struct ExperimentConfig {
  std::string id = "experiment";
  ExperimentKind kind = ExperimentKind::Comparison;
  std::uint64_t seed = 0;
  int trials = 8;
  std::string output_dir = ".";
  Arch arch;
  TeacherInit teacher;
  GridBlock grid;
  DataBlock data;
  std::vector<RounderKind> methods = {RounderKind::Rtn, RounderKind::DiscQuant};
  DiscQuantConfig discquant;
  WalkConfig walk;
  std::size_t walk_samples = 64;
  IncoherenceBlock incoherence;
  FirstOrderBlock first_order;
  ScalingBlock scaling;

  /// Checks every block; throws InvalidConfig on the first problem.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Unknown keys are rejected. The result is validated.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);

 private:
  void check_first_order() const;
  void check_scaling() const;
};

struct Report {
  std::string id;
  std::string kind;
  nlohmann::ordered_json config;
  std::vector<nlohmann::ordered_json> rows;  // sorted by seed
  nlohmann::ordered_json summary;
  int failures = 0;
  double wall_clock_seconds = 0.0;

  nlohmann::ordered_json to_json() const;
  /// Field order is preserved, so parse with ordered_json for a canonical
  /// round trip.
  static Report from_json(const nlohmann::ordered_json& j);
};

/// Per-trial seeds: trial t gets derive_seed(cfg.seed, t).
std::uint64_t trial_seed(const ExperimentConfig& cfg, int trial);

/// Teacher for a trial seed.
ToyModel trial_teacher(const ExperimentConfig& cfg, std::uint64_t seed);

Report run_comparison(const ExperimentConfig& cfg, int workers = 1);
Report run_first_order(const ExperimentConfig& cfg, int workers = 1);
Report run_scaling(const ExperimentConfig& cfg, int workers = 1);
Report run_experiment(const ExperimentConfig& cfg, int workers = 1);

struct Stats {
  std::size_t count = 0;
  double median = 0.0;
  double q1 = 0.0, q3 = 0.0;
  double mean = 0.0;
  double stderr_mean = 0.0;
};

/// Linear-interpolation quartiles; stderr = sd / sqrt(count).
Stats describe(std::vector<double> v);

/// Groups rows by the given key columns and describes `metric` in each
/// group. Rows whose metric is null or whose status is not "ok" are skipped.
nlohmann::ordered_json summarize(const std::vector<nlohmann::ordered_json>& rows,
                                 const std::vector<std::string>& keys, const std::string& metric);

std::string emit_json(const Report& r);
std::string emit_csv(const Report& r);

/// Writes `<dir>/<id>.json` or `.csv`. Throws IoError if the file cannot be
/// written.
std::string emit(const Report& r, const std::string& format, const std::string& dir);

/// Worker count from DQ_WORKERS, defaulting to 1.
int workers_from_env();

}  // namespace dq
