#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sotu/classifier.hpp"
#include "sotu/dataset.hpp"
#include "sotu/delta_ops.hpp"
#include "sotu/trainer.hpp"

namespace sotu {

/// Gaussian-blob classes. Class means are drawn in a low-dimensional latent
/// space and pushed through a fixed random nonlinear map into input space,
/// so the base (pretraining) classes and the stream classes share structure
/// without sharing labels. Base classes get ids >= num_classes.
struct SyntheticSpec {
  std::size_t num_classes = 20;
  std::size_t base_classes = 20;
  std::size_t input_dim = 16;
  std::size_t latent_dim = 8;
  std::size_t base_latent_dims = 0;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 40;
  double separation = 1.5;
  double noise = 1.0;
};

struct SyntheticData {
  LabeledDataset base_train;
  LabeledDataset stream_train;
  LabeledDataset stream_test;
};

SyntheticData make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct Task {
  std::vector<ClassId> classes;  // sorted
  LabeledDataset train;
  LabeledDataset test;
};

struct TaskStream {
  std::vector<Task> tasks;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return tasks.size(); }
};

/// Per-task class counts: `classes` spread over `tasks` as evenly as
/// possible, earlier tasks taking the remainder.
std::vector<std::size_t> split_sizes(std::size_t classes, std::size_t tasks);

/// Shuffles the class ids with `seed` and cuts them into `tasks` disjoint
/// groups; each task receives every train/test row of its classes.
TaskStream make_task_stream(const LabeledDataset& train, const LabeledDataset& test,
                            std::size_t tasks, std::uint64_t seed);

struct Metrics {
  double avg_acc = 0.0;
  double final_acc = 0.0;
};

/// Mean and last entry of the cumulative accuracies.
Metrics compute_metrics(std::span<const double> accuracies);

struct MetricsRecord {
  /// R[k] is the accuracy over the pooled test rows of tasks 1..k+1.
  std::vector<double> R;
  double avg_acc = 0.0;
  double final_acc = 0.0;
};

// Defaults are a small relu network fine-tuned hard enough that dense
// merges visibly interfere; the synthetic stream shares its latent space
// with ten weakly pretrained base classes.
struct RunConfig {
  ModelSpec model{16, {64}, 16, Activation::relu};
  Hyper hyper{0.7, 20, 16, 0};  // fine-tuning; hyper.seed is the master training seed
  double pretrain_learning_rate = 0.05;
  std::size_t pretrain_epochs = 10;
  double mask_rate = 0.9;
  bool use_projection = false;
  ProjectionSpec projection;  // out_dim 0 means 4 x embed_dim
  std::size_t buffer_per_class = 500;
  bool recompute_prototypes = false;
  std::size_t num_tasks = 5;
  std::uint64_t stream_seed = 0;
  SyntheticSpec data{.base_classes = 10, .latent_dim = 4, .separation = 1.0};
  std::filesystem::path train_csv;  // empty: synthetic data
  std::filesystem::path test_csv;
  std::filesystem::path base_csv;
  std::filesystem::path output_dir;

  std::optional<ProjectionSpec> projection_spec() const;
  void validate() const;
};

// Flat `key = value` config files; keys match RunConfig field names.
std::vector<std::string> config_keys();
std::string config_help(const std::string& key);
std::string get_config_value(const RunConfig& cfg, const std::string& key);
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Seeds derived from the master seeds; task k never depends on tasks > k.
struct TaskSeeds {
  std::uint64_t task = 0;  // head and finetune are derived from this one
  std::uint64_t head = 0;
  std::uint64_t finetune = 0;
  std::uint64_t mask = 0;
  std::uint64_t prototypes = 0;
};
TaskSeeds task_seeds(const RunConfig& cfg, std::size_t task_index);
std::uint64_t pretrain_seed(const RunConfig& cfg);

struct ExperimentData {
  std::optional<LabeledDataset> base_train;
  TaskStream stream;
};

/// Synthetic data or CSV ingestion per the config, split into a stream.
ExperimentData prepare_data(const RunConfig& cfg);

/// Trains backbone + throwaway head on the base classes. Without base data
/// the initialized backbone is returned untrained.
ParamSet pretrain(const RunConfig& cfg, const std::optional<LabeledDataset>& base);

/// Fine-tunes theta_pre plus a fresh head on `train`; the head init and the
/// shuffling seeds are derived from `task_seed`. Returns the backbone.
ParamSet finetune_with_seed(const RunConfig& cfg, const ParamSet& theta_pre,
                            const LabeledDataset& train, std::uint64_t task_seed);

/// finetune_with_seed that also returns the trained task head.
TrainResult finetune_with_head(const RunConfig& cfg, const ParamSet& theta_pre,
                               const LabeledDataset& data, std::uint64_t task_seed);

/// finetune_with_seed with the task's derived seed.
ParamSet finetune_task(const RunConfig& cfg, const ParamSet& theta_pre, const Task& task,
                       std::size_t task_index);

/// Dense deltas of every task, each fine-tuned from theta_pre.
std::vector<ParamSet> finetune_stream(const RunConfig& cfg, const ParamSet& theta_pre,
                                      const TaskStream& stream);

struct RunResult {
  MetricsRecord metrics;
  std::vector<SparseDelta> deltas;
  ParamSet merged;
  PrototypeSet prototypes;
};

/// Mask, merge, prototype and evaluate stages over precomputed dense deltas.
RunResult run_from_deltas(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream,
                          std::span<const ParamSet> dense_deltas);

/// Full pipeline: fine-tune each task from theta_pre, mask its delta, merge
/// all deltas so far, add the task's prototypes, evaluate on tasks 1..k.
RunResult run_sotu(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream);

/// Accuracy of NCM over `test` rows; rows whose feature is all zero count
/// as errors.
double ncm_accuracy(const PrototypeSet& protos, const ParamSet& backbone, Activation act,
                    const Projection* proj, const LabeledDataset& test);

/// Prototypes from the task's own train rows, evaluated on its test rows.
double task_ncm_accuracy(const RunConfig& cfg, const ParamSet& backbone, const Task& task,
                         std::size_t task_index);

/// Writes metrics.csv, summary.csv, similarity.csv, collisions.csv and
/// all model artifacts for a finished run.
void write_run_outputs(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream,
                       const RunResult& result, const std::filesystem::path& dir);

/// prepare_data + pretrain + run_sotu + write_run_outputs (when output_dir
/// is set).
RunResult run_experiment(const RunConfig& cfg);

struct SweepRow {
  double mask_rate = 0.0;
  double avg_acc = 0.0;
  double final_acc = 0.0;
  std::optional<double> mean_abs_cosine;  // undefined when a delta is all zero
  double multi_collision_rate = 0.0;
  std::string status = "ok";
};

/// One run per rate with identical seeds (fine-tuning is shared because it
/// does not depend on the rate).
std::vector<SweepRow> sweep_mask_rate(const RunConfig& cfg, const ParamSet& theta_pre,
                                      const TaskStream& stream, std::span<const double> rates);

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);
/// Line chart of final accuracy against the mask rate.
void write_sweep_svg(std::span<const SweepRow> rows, const std::filesystem::path& path);

/// Per-task accuracies of one merged model built from all stream deltas at
/// a given rate, next to each fine-tuned model's own-task accuracy.
struct MergeStudy {
  std::vector<double> finetuned_acc;
  std::vector<double> merged_acc;
  double mean_merged() const;
};
MergeStudy merge_study(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream,
                       std::span<const ParamSet> dense_deltas, double mask_rate);

}  // namespace sotu
