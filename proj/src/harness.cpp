#include "sotu/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "sotu/checkpoint_io.hpp"
#include "sotu/rng.hpp"

namespace sotu {

namespace {

// Seed streams. Values are arbitrary but fixed; changing them changes every
// derived artifact.
constexpr std::uint64_t kStreamMix = 0x11;
constexpr std::uint64_t kStreamMeans = 0x12;
constexpr std::uint64_t kStreamSamples = 0x13;
constexpr std::uint64_t kStreamSplit = 0x14;
constexpr std::uint64_t kPretrain = 0x21;
constexpr std::uint64_t kTaskBase = 0x1000;

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot open '" + path.string() + "' for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  return out;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_classes == 0 || spec.input_dim == 0 || spec.latent_dim == 0 ||
      spec.train_per_class == 0 || spec.test_per_class == 0) {
    throw Error(Errc::InvalidArgument, "synthetic spec sizes must be positive");
  }
  const std::size_t d = spec.input_dim, l = spec.latent_dim;
  Rng mix_rng(derive_seed(seed, kStreamMix));
  std::vector<double> mix(d * l);
  for (auto& v : mix) v = mix_rng.normal() / std::sqrt(static_cast<double>(l));

  const std::size_t total = spec.num_classes + spec.base_classes;
  Rng mean_rng(derive_seed(seed, kStreamMeans));
  std::vector<double> means(total * l);
  for (auto& v : means) v = spec.separation * mean_rng.normal();
  // Optionally confine base means to the leading latent dims and stream
  // means to the rest, so pretraining never sees the stream's structure.
  const std::size_t split = spec.base_latent_dims;
  if (split > 0 && split < l) {
    for (std::size_t c = 0; c < total; ++c) {
      const bool base = c >= spec.num_classes;
      for (std::size_t j = 0; j < l; ++j) {
        if ((j < split) != base) means[c * l + j] = 0.0;
      }
    }
  }

  auto sample = [&](std::size_t cls, std::size_t count, std::uint64_t stream,
                    std::vector<double>& f, std::vector<ClassId>& labels) {
    Rng rng(derive_seed(derive_seed(seed, kStreamSamples), stream * total + cls));
    std::vector<double> z(l);
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t j = 0; j < l; ++j) z[j] = means[cls * l + j] + spec.noise * rng.normal();
      for (std::size_t i = 0; i < d; ++i) {
        double a = 0.0;
        for (std::size_t j = 0; j < l; ++j) a += mix[i * l + j] * z[j];
        f.push_back(std::tanh(a) + 0.05 * rng.normal());
      }
      labels.push_back(static_cast<ClassId>(cls));
    }
  };

  std::vector<double> tr_f, te_f, base_f;
  std::vector<ClassId> tr_l, te_l, base_l;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    sample(c, spec.train_per_class, 0, tr_f, tr_l);
    sample(c, spec.test_per_class, 1, te_f, te_l);
  }
  for (std::size_t c = spec.num_classes; c < total; ++c) {
    sample(c, spec.train_per_class, 0, base_f, base_l);
  }
  if (base_l.empty()) {
    throw Error(Errc::InvalidArgument, "synthetic data needs at least one base class");
  }
  return SyntheticData{LabeledDataset(d, std::move(base_f), std::move(base_l)),
                       LabeledDataset(d, std::move(tr_f), std::move(tr_l)),
                       LabeledDataset(d, std::move(te_f), std::move(te_l))};
}

std::vector<std::size_t> split_sizes(std::size_t classes, std::size_t tasks) {
  if (tasks == 0) throw Error(Errc::InvalidArgument, "need at least one task");
  if (classes < tasks) {
    throw Error(Errc::TooFewClasses, std::to_string(classes) + " classes cannot fill " +
                                         std::to_string(tasks) + " tasks");
  }
  std::vector<std::size_t> sizes(tasks, classes / tasks);
  for (std::size_t i = 0; i < classes % tasks; ++i) ++sizes[i];
  return sizes;
}

TaskStream make_task_stream(const LabeledDataset& train, const LabeledDataset& test,
                            std::size_t tasks, std::uint64_t seed) {
  auto classes = train.classes();
  for (auto c : test.classes()) {
    if (!std::binary_search(classes.begin(), classes.end(), c)) {
      throw Error(Errc::InvalidArgument, "test class " + std::to_string(c) + " has no training rows");
    }
  }
  const auto sizes = split_sizes(classes.size(), tasks);
  Rng rng(derive_seed(seed, kStreamSplit));
  rng.shuffle(classes);

  TaskStream stream;
  stream.seed = seed;
  std::size_t offset = 0;
  for (auto size : sizes) {
    std::vector<ClassId> cls(classes.begin() + static_cast<std::ptrdiff_t>(offset),
                             classes.begin() + static_cast<std::ptrdiff_t>(offset + size));
    offset += size;
    std::sort(cls.begin(), cls.end());
    auto rows_of = [&cls](const LabeledDataset& ds) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (std::binary_search(cls.begin(), cls.end(), ds.label(i))) rows.push_back(i);
      }
      return rows;
    };
    const auto train_rows = rows_of(train);
    const auto test_rows = rows_of(test);
    if (test_rows.empty()) throw Error(Errc::InvalidArgument, "a task has no test rows");
    stream.tasks.push_back(Task{cls, train.subset(train_rows), test.subset(test_rows)});
  }
  return stream;
}

Metrics compute_metrics(std::span<const double> accuracies) {
  if (accuracies.empty()) throw Error(Errc::EmptyList, "no accuracies");
  double sum = 0.0;
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0)) throw Error(Errc::InvalidArgument, "accuracy outside [0,1]");
    sum += a;
  }
  return Metrics{sum / static_cast<double>(accuracies.size()), accuracies.back()};
}

// ---------------------------------------------------------------------------
// Configuration

std::optional<ProjectionSpec> RunConfig::projection_spec() const {
  if (!use_projection) return std::nullopt;
  ProjectionSpec p = projection;
  if (p.out_dim == 0) p.out_dim = 4 * model.embed_dim;
  return p;
}

void RunConfig::validate() const {
  model.validate();
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
    throw Error(Errc::InvalidProbability, "mask_rate must lie in [0,1]");
  }
  if (buffer_per_class == 0) throw Error(Errc::InvalidArgument, "buffer_per_class must be >= 1");
  if (num_tasks == 0) throw Error(Errc::InvalidArgument, "num_tasks must be >= 1");
  if (!(hyper.learning_rate > 0.0) || !(pretrain_learning_rate > 0.0)) {
    throw Error(Errc::InvalidArgument, "learning rates must be positive");
  }
  if (hyper.batch_size == 0) throw Error(Errc::InvalidArgument, "batch_size must be >= 1");
  if (train_csv.empty() != test_csv.empty()) {
    throw Error(Errc::InvalidArgument, "train_csv and test_csv must be given together");
  }
  for (const auto* p : {&train_csv, &test_csv, &base_csv}) {
    if (!p->empty() && !std::filesystem::exists(*p)) {
      throw Error(Errc::Io, "missing data file '" + p->string() + "'");
    }
  }
}

namespace {

struct KeyInfo {
  const char* key;
  const char* help;
};

constexpr KeyInfo kKeys[] = {
    {"input_dim", "input feature dimension"},
    {"hidden_dims", "comma-separated hidden layer widths"},
    {"embed_dim", "embedding dimension"},
    {"activation", "relu or tanh"},
    {"learning_rate", "fine-tuning SGD learning rate"},
    {"epochs", "fine-tuning epochs per task"},
    {"batch_size", "mini-batch size"},
    {"seed", "master training seed (init, heads, shuffles, masks)"},
    {"pretrain_learning_rate", "pretraining SGD learning rate"},
    {"pretrain_epochs", "pretraining epochs on the base classes"},
    {"mask_rate", "probability of zeroing a delta coordinate"},
    {"projection", "on or off: random projection before NCM"},
    {"projection_out_dim", "projection width (0 = 4 x embed_dim)"},
    {"projection_seed", "projection matrix seed"},
    {"projection_nonlinearity", "relu or none"},
    {"buffer_per_class", "examples per class used for a prototype"},
    {"recompute_prototypes", "true: rebuild all prototypes from buffers with each merged model"},
    {"num_tasks", "number of tasks in the stream"},
    {"stream_seed", "seed for synthetic data and class shuffling"},
    {"num_classes", "synthetic stream classes"},
    {"base_classes", "synthetic pretraining classes"},
    {"latent_dim", "synthetic latent dimension"},
    {"base_latent_dims", "latent dims carrying base-class structure; stream uses the rest (0 = shared)"},
    {"train_per_class", "synthetic train rows per class"},
    {"test_per_class", "synthetic test rows per class"},
    {"separation", "synthetic class-mean spread"},
    {"noise", "synthetic within-class spread"},
    {"train_csv", "stream training CSV (replaces synthetic data)"},
    {"test_csv", "stream test CSV"},
    {"base_csv", "pretraining CSV"},
    {"output_dir", "directory for artifacts and CSV outputs"},
};

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) {
    throw Error(Errc::InvalidArgument, "config key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
  return static_cast<T>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(x)) {
    throw Error(Errc::InvalidArgument, "config key '" + key + "' expects a number, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw Error(Errc::InvalidArgument, "config key '" + key + "' expects on/off, got '" + v + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& k : kKeys) keys.emplace_back(k.key);
  return keys;
}

std::string config_help(const std::string& key) {
  for (const auto& k : kKeys) {
    if (key == k.key) return k.help;
  }
  throw Error(Errc::InvalidArgument, "unknown config key '" + key + "'");
}

std::string get_config_value(const RunConfig& c, const std::string& key) {
  if (key == "input_dim") return std::to_string(c.model.input_dim);
  if (key == "hidden_dims") {
    std::string s;
    for (std::size_t i = 0; i < c.model.hidden_dims.size(); ++i) {
      s += (i ? "," : "") + std::to_string(c.model.hidden_dims[i]);
    }
    return s;
  }
  if (key == "embed_dim") return std::to_string(c.model.embed_dim);
  if (key == "activation") return to_string(c.model.activation);
  if (key == "learning_rate") return fmt_double(c.hyper.learning_rate);
  if (key == "epochs") return std::to_string(c.hyper.epochs);
  if (key == "batch_size") return std::to_string(c.hyper.batch_size);
  if (key == "seed") return std::to_string(c.hyper.seed);
  if (key == "pretrain_learning_rate") return fmt_double(c.pretrain_learning_rate);
  if (key == "pretrain_epochs") return std::to_string(c.pretrain_epochs);
  if (key == "mask_rate") return fmt_double(c.mask_rate);
  if (key == "projection") return c.use_projection ? "on" : "off";
  if (key == "projection_out_dim") return std::to_string(c.projection.out_dim);
  if (key == "projection_seed") return std::to_string(c.projection.seed);
  if (key == "projection_nonlinearity") return to_string(c.projection.nonlinearity);
  if (key == "buffer_per_class") return std::to_string(c.buffer_per_class);
  if (key == "recompute_prototypes") return c.recompute_prototypes ? "true" : "false";
  if (key == "num_tasks") return std::to_string(c.num_tasks);
  if (key == "stream_seed") return std::to_string(c.stream_seed);
  if (key == "num_classes") return std::to_string(c.data.num_classes);
  if (key == "base_classes") return std::to_string(c.data.base_classes);
  if (key == "latent_dim") return std::to_string(c.data.latent_dim);
  if (key == "base_latent_dims") return std::to_string(c.data.base_latent_dims);
  if (key == "train_per_class") return std::to_string(c.data.train_per_class);
  if (key == "test_per_class") return std::to_string(c.data.test_per_class);
  if (key == "separation") return fmt_double(c.data.separation);
  if (key == "noise") return fmt_double(c.data.noise);
  if (key == "train_csv") return c.train_csv.string();
  if (key == "test_csv") return c.test_csv.string();
  if (key == "base_csv") return c.base_csv.string();
  if (key == "output_dir") return c.output_dir.string();
  throw Error(Errc::InvalidArgument, "unknown config key '" + key + "'");
}

void set_config_value(RunConfig& c, const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  if (key == "input_dim") {
    c.model.input_dim = parse_unsigned<std::size_t>(key, v);
    c.data.input_dim = c.model.input_dim;
  } else if (key == "hidden_dims") {
    std::vector<std::size_t> dims;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) dims.push_back(parse_unsigned<std::size_t>(key, trim(part)));
    c.model.hidden_dims = std::move(dims);
  } else if (key == "embed_dim") {
    c.model.embed_dim = parse_unsigned<std::size_t>(key, v);
  } else if (key == "activation") {
    c.model.activation = parse_activation(v);
  } else if (key == "learning_rate") {
    c.hyper.learning_rate = parse_double(key, v);
  } else if (key == "epochs") {
    c.hyper.epochs = parse_unsigned<std::size_t>(key, v);
  } else if (key == "batch_size") {
    c.hyper.batch_size = parse_unsigned<std::size_t>(key, v);
  } else if (key == "seed") {
    c.hyper.seed = parse_unsigned<std::uint64_t>(key, v);
  } else if (key == "pretrain_learning_rate") {
    c.pretrain_learning_rate = parse_double(key, v);
  } else if (key == "pretrain_epochs") {
    c.pretrain_epochs = parse_unsigned<std::size_t>(key, v);
  } else if (key == "mask_rate") {
    c.mask_rate = parse_double(key, v);
  } else if (key == "projection") {
    c.use_projection = parse_bool(key, v);
  } else if (key == "projection_out_dim") {
    c.projection.out_dim = parse_unsigned<std::size_t>(key, v);
  } else if (key == "projection_seed") {
    c.projection.seed = parse_unsigned<std::uint64_t>(key, v);
  } else if (key == "projection_nonlinearity") {
    c.projection.nonlinearity = parse_nonlinearity(v);
  } else if (key == "buffer_per_class") {
    c.buffer_per_class = parse_unsigned<std::size_t>(key, v);
  } else if (key == "recompute_prototypes") {
    c.recompute_prototypes = parse_bool(key, v);
  } else if (key == "num_tasks") {
    c.num_tasks = parse_unsigned<std::size_t>(key, v);
  } else if (key == "stream_seed") {
    c.stream_seed = parse_unsigned<std::uint64_t>(key, v);
  } else if (key == "num_classes") {
    c.data.num_classes = parse_unsigned<std::size_t>(key, v);
  } else if (key == "base_classes") {
    c.data.base_classes = parse_unsigned<std::size_t>(key, v);
  } else if (key == "latent_dim") {
    c.data.latent_dim = parse_unsigned<std::size_t>(key, v);
  } else if (key == "base_latent_dims") {
    c.data.base_latent_dims = parse_unsigned<std::size_t>(key, v);
  } else if (key == "train_per_class") {
    c.data.train_per_class = parse_unsigned<std::size_t>(key, v);
  } else if (key == "test_per_class") {
    c.data.test_per_class = parse_unsigned<std::size_t>(key, v);
  } else if (key == "separation") {
    c.data.separation = parse_double(key, v);
  } else if (key == "noise") {
    c.data.noise = parse_double(key, v);
  } else if (key == "train_csv") {
    c.train_csv = v;
  } else if (key == "test_csv") {
    c.test_csv = v;
  } else if (key == "base_csv") {
    c.base_csv = v;
  } else if (key == "output_dir") {
    c.output_dir = v;
  } else {
    throw Error(Errc::InvalidArgument, "unknown config key '" + key + "'");
  }
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open config '" + path.string() + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::Format, path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  for (const auto& [k, v] : read_config_file(path)) set_config_value(cfg, k, v);
  return cfg;
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& k : kKeys) out << k.key << " = " << get_config_value(cfg, k.key) << '\n';
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Pipeline

TaskSeeds task_seeds(const RunConfig& cfg, std::size_t task_index) {
  const auto t = derive_seed(cfg.hyper.seed, kTaskBase + task_index);
  return TaskSeeds{t, derive_seed(t, 1), derive_seed(t, 2), derive_seed(t, 3),
                   derive_seed(derive_seed(cfg.stream_seed, kTaskBase + task_index), 4)};
}

std::uint64_t pretrain_seed(const RunConfig& cfg) { return derive_seed(cfg.hyper.seed, kPretrain); }

ExperimentData prepare_data(const RunConfig& cfg) {
  cfg.validate();
  ExperimentData out;
  if (cfg.train_csv.empty()) {
    auto spec = cfg.data;
    spec.input_dim = cfg.model.input_dim;
    auto syn = make_synthetic(spec, cfg.stream_seed);
    out.base_train = std::move(syn.base_train);
    out.stream = make_task_stream(syn.stream_train, syn.stream_test, cfg.num_tasks, cfg.stream_seed);
  } else {
    auto train = load_dataset_csv(cfg.train_csv);
    auto test = load_dataset_csv(cfg.test_csv);
    if (!cfg.base_csv.empty()) out.base_train = load_dataset_csv(cfg.base_csv);
    out.stream = make_task_stream(train, test, cfg.num_tasks, cfg.stream_seed);
  }
  for (const auto& t : out.stream.tasks) {
    if (t.train.dim() != cfg.model.input_dim) {
      throw Error(Errc::ShapeMismatch, "data has " + std::to_string(t.train.dim()) +
                                           " features but input_dim is " +
                                           std::to_string(cfg.model.input_dim));
    }
  }
  if (out.base_train) {
    for (auto c : out.base_train->classes()) {
      for (const auto& t : out.stream.tasks) {
        if (std::binary_search(t.classes.begin(), t.classes.end(), c)) {
          throw Error(Errc::ClassCollision, "base class " + std::to_string(c) + " also appears in the stream");
        }
      }
    }
  }
  return out;
}

ParamSet pretrain(const RunConfig& cfg, const std::optional<LabeledDataset>& base) {
  const auto seed = pretrain_seed(cfg);
  auto backbone = init_model(cfg.model, derive_seed(seed, 1));
  if (!base || cfg.pretrain_epochs == 0) return backbone;
  const auto head = init_head(cfg.model.embed_dim, base->classes().size(), derive_seed(seed, 2));
  Hyper h;
  h.learning_rate = cfg.pretrain_learning_rate;
  h.epochs = cfg.pretrain_epochs;
  h.batch_size = std::min(cfg.hyper.batch_size, base->size());
  h.seed = derive_seed(seed, 3);
  return train(with_head(backbone, head), *base, h, cfg.model.activation).backbone;
}

TrainResult finetune_with_head(const RunConfig& cfg, const ParamSet& theta_pre,
                               const LabeledDataset& data, std::uint64_t task_seed) {
  const auto head =
      init_head(backbone_embed_dim(theta_pre), data.classes().size(), derive_seed(task_seed, 1));
  Hyper h = cfg.hyper;
  h.seed = derive_seed(task_seed, 2);
  h.batch_size = std::min(h.batch_size, data.size());
  return train(with_head(theta_pre, head), data, h, cfg.model.activation);
}

ParamSet finetune_with_seed(const RunConfig& cfg, const ParamSet& theta_pre,
                            const LabeledDataset& data, std::uint64_t task_seed) {
  return finetune_with_head(cfg, theta_pre, data, task_seed).backbone;
}

ParamSet finetune_task(const RunConfig& cfg, const ParamSet& theta_pre, const Task& task,
                       std::size_t task_index) {
  return finetune_with_seed(cfg, theta_pre, task.train, task_seeds(cfg, task_index).task);
}

namespace {

// Runs one pipeline stage, prefixing any library error with where it happened.
template <class F>
auto stage(const char* name, std::size_t task_index, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), std::string(name) + " (task " + std::to_string(task_index + 1) + "): " + e.detail());
  }
}

}  // namespace

std::vector<ParamSet> finetune_stream(const RunConfig& cfg, const ParamSet& theta_pre,
                                      const TaskStream& stream) {
  std::vector<ParamSet> deltas;
  for (std::size_t k = 0; k < stream.size(); ++k) {
    deltas.push_back(stage("finetune", k, [&] {
      return compute_delta(finetune_task(cfg, theta_pre, stream.tasks[k], k), theta_pre);
    }));
  }
  return deltas;
}

double ncm_accuracy(const PrototypeSet& protos, const ParamSet& backbone, Activation act,
                    const Projection* proj, const LabeledDataset& test) {
  const auto feats = feature_batch(backbone, act, test.features(), test.size(), proj);
  const std::size_t dim = feats.size() / test.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::span<const double> f(feats.data() + i * dim, dim);
    try {
      if (ncm_predict(protos, f) == test.label(i)) ++correct;
    } catch (const Error& e) {
      if (e.code() != Errc::ZeroFeature) throw;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace {

std::optional<Projection> projection_for(const RunConfig& cfg, const ParamSet& backbone) {
  auto spec = cfg.projection_spec();
  if (!spec) return std::nullopt;
  return build_projection(*spec, backbone_embed_dim(backbone));
}

}  // namespace

double task_ncm_accuracy(const RunConfig& cfg, const ParamSet& backbone, const Task& task,
                         std::size_t task_index) {
  const auto proj = projection_for(cfg, backbone);
  const Projection* p = proj ? &*proj : nullptr;
  PrototypeSet protos;
  build_prototypes(protos, backbone, cfg.model.activation, task.train, cfg.buffer_per_class, p,
                   task_seeds(cfg, task_index).prototypes);
  return ncm_accuracy(protos, backbone, cfg.model.activation, p, task.test);
}

RunResult run_from_deltas(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream,
                          std::span<const ParamSet> dense_deltas) {
  if (dense_deltas.size() != stream.size()) {
    throw Error(Errc::InvalidArgument, "one dense delta per task required");
  }
  const auto base = fingerprint(theta_pre);
  const auto proj = projection_for(cfg, theta_pre);
  const Projection* p = proj ? &*proj : nullptr;
  const auto act = cfg.model.activation;

  RunResult res;
  std::vector<LabeledDataset> seen_tests;
  std::vector<LabeledDataset> buffers;
  std::set<ClassId> seen_classes;
  for (std::size_t k = 0; k < stream.size(); ++k) {
    const auto& task = stream.tasks[k];
    const auto seeds = task_seeds(cfg, k);
    res.deltas.push_back(
        stage("mask", k, [&] { return mask_delta(dense_deltas[k], cfg.mask_rate, seeds.mask, base); }));
    res.merged = stage("merge", k, [&] { return merge_deltas(theta_pre, res.deltas); });

    stage("prototypes", k, [&] {
      if (cfg.recompute_prototypes) {
        const auto rows = select_buffer(task.train, cfg.buffer_per_class, seeds.prototypes);
        buffers.push_back(task.train.subset(rows));
        res.prototypes = PrototypeSet{};
        for (std::size_t j = 0; j < buffers.size(); ++j) {
          // Buffers already hold at most buffer_per_class rows per class.
          build_prototypes(res.prototypes, res.merged, act, buffers[j], cfg.buffer_per_class, p,
                           task_seeds(cfg, j).prototypes);
        }
      } else {
        build_prototypes(res.prototypes, res.merged, act, task.train, cfg.buffer_per_class, p,
                         seeds.prototypes);
      }
    });

    seen_classes.insert(task.classes.begin(), task.classes.end());
    seen_tests.push_back(task.test);
    const auto pooled = concat(seen_tests);
    // Evaluation must only see classes from tasks 1..k.
    for (auto c : pooled.classes()) {
      if (!seen_classes.count(c)) throw Error(Errc::Internal, "test leakage: class from a future task");
    }
    for (auto c : res.prototypes.class_ids()) {
      if (!seen_classes.count(c)) throw Error(Errc::Internal, "prototype for an unseen class");
    }
    res.metrics.R.push_back(
        stage("evaluate", k, [&] { return ncm_accuracy(res.prototypes, res.merged, act, p, pooled); }));
  }
  if (!res.metrics.R.empty()) {
    const auto m = compute_metrics(res.metrics.R);
    res.metrics.avg_acc = m.avg_acc;
    res.metrics.final_acc = m.final_acc;
  }
  return res;
}

RunResult run_sotu(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream) {
  const auto dense = finetune_stream(cfg, theta_pre, stream);
  return run_from_deltas(cfg, theta_pre, stream, dense);
}

void write_run_outputs(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream,
                       const RunResult& result, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "data");
  save_config(cfg, dir / "config.cfg");
  save_paramset(theta_pre, dir / "pre.sotu");
  save_paramset(result.merged, dir / "merged.sotu");
  save_prototypes(result.prototypes, dir / "prototypes.protos");
  for (std::size_t k = 0; k < result.deltas.size(); ++k) {
    const auto id = std::to_string(k + 1);
    save_sparse_delta(result.deltas[k], dir / ("task" + id + ".sdelta"));
    save_dataset_csv(stream.tasks[k].train, dir / "data" / ("task" + id + "_train.csv"));
    save_dataset_csv(stream.tasks[k].test, dir / "data" / ("task" + id + "_test.csv"));
  }
  {
    auto out = open_out(dir / "metrics.csv");
    out << "k,R_k\n";
    for (std::size_t k = 0; k < result.metrics.R.size(); ++k) out << k + 1 << ',' << result.metrics.R[k] << '\n';
  }
  {
    auto out = open_out(dir / "summary.csv");
    out << "avg_acc,final_acc,accuracy_weighting\n";
    out << result.metrics.avg_acc << ',' << result.metrics.final_acc << ",example\n";
  }
  {
    auto out = open_out(dir / "manifest.csv");
    out << "task,classes,task_seed,mask_seed,prototype_seed\n";
    for (std::size_t k = 0; k < stream.size(); ++k) {
      const auto s = task_seeds(cfg, k);
      out << k + 1 << ',';
      for (std::size_t i = 0; i < stream.tasks[k].classes.size(); ++i) {
        out << (i ? ";" : "") << stream.tasks[k].classes[i];
      }
      out << ',' << s.task << ',' << s.mask << ',' << s.prototypes << '\n';
    }
  }
  if (!result.deltas.empty()) {
    write_collisions_csv(collision_report(result.deltas), dir / "collisions.csv");
    try {
      write_matrix_csv(delta_cosine_matrix(result.deltas), dir / "similarity.csv");
    } catch (const Error& e) {
      if (e.code() != Errc::ZeroDelta) throw;
      auto out = open_out(dir / "similarity.csv");
      out << "# undefined: " << e.what() << '\n';
    }
  }
}

RunResult run_experiment(const RunConfig& cfg) {
  auto data = prepare_data(cfg);
  const auto theta_pre = pretrain(cfg, data.base_train);
  auto result = run_sotu(cfg, theta_pre, data.stream);
  if (!cfg.output_dir.empty()) {
    write_run_outputs(cfg, theta_pre, data.stream, result, cfg.output_dir);
    if (data.base_train) save_dataset_csv(*data.base_train, cfg.output_dir / "data" / "base_train.csv");
  }
  return result;
}

std::vector<SweepRow> sweep_mask_rate(const RunConfig& cfg, const ParamSet& theta_pre,
                                      const TaskStream& stream, std::span<const double> rates) {
  std::vector<SweepRow> rows;
  std::vector<ParamSet> dense;
  std::string finetune_error;
  try {
    dense = finetune_stream(cfg, theta_pre, stream);
  } catch (const Error& e) {
    finetune_error = e.what();
  }
  for (double p : rates) {
    SweepRow row;
    row.mask_rate = p;
    if (!finetune_error.empty()) {
      row.status = "failed: " + finetune_error;
      rows.push_back(row);
      continue;
    }
    try {
      auto c = cfg;
      c.mask_rate = p;
      const auto res = run_from_deltas(c, theta_pre, stream, dense);
      row.avg_acc = res.metrics.avg_acc;
      row.final_acc = res.metrics.final_acc;
      row.multi_collision_rate = collision_report(res.deltas).multi_collision_rate;
      try {
        row.mean_abs_cosine = mean_abs_off_diagonal(delta_cosine_matrix(res.deltas));
      } catch (const Error& e) {
        if (e.code() != Errc::ZeroDelta) throw;
      }
    } catch (const Error& e) {
      row.status = std::string("failed: ") + e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "p,avg_acc,final_acc,mean_abs_offdiag_cosine,multi_collision_rate,status\n";
  for (const auto& r : rows) {
    out << r.mask_rate << ',' << r.avg_acc << ',' << r.final_acc << ',';
    if (r.mean_abs_cosine) {
      out << *r.mean_abs_cosine;
    } else {
      out << "undefined";
    }
    out << ',' << r.multi_collision_rate << ',' << r.status << '\n';
  }
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

void write_sweep_svg(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  constexpr double W = 480, H = 320, L = 60, R = 20, T = 20, B = 50;
  auto x_of = [&](double p) { return L + p * (W - L - R); };
  auto y_of = [&](double a) { return H - B - a * (H - T - B); };

  std::vector<const SweepRow*> ok;
  for (const auto& r : rows) {
    if (r.status == "ok") ok.push_back(&r);
  }
  std::sort(ok.begin(), ok.end(), [](auto* a, auto* b) { return a->mask_rate < b->mask_rate; });

  auto out = open_out(path);
  out << std::setprecision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    out << "<text x=\"" << x_of(v) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << v
        << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\">" << v
        << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\">mask rate p</text>\n";
  out << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">final accuracy</text>\n";
  if (!ok.empty()) {
    out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < ok.size(); ++i) {
      out << (i ? " " : "") << x_of(ok[i]->mask_rate) << ',' << y_of(ok[i]->final_acc);
    }
    out << "\"/>\n";
    for (const auto* r : ok) {
      out << "<circle cx=\"" << x_of(r->mask_rate) << "\" cy=\"" << y_of(r->final_acc)
          << "\" r=\"3\" fill=\"steelblue\"/>\n";
    }
  }
  out << "</svg>\n";
  if (!out) throw Error(Errc::Io, "write failed for '" + path.string() + "'");
}

double MergeStudy::mean_merged() const {
  if (merged_acc.empty()) return 0.0;
  return std::accumulate(merged_acc.begin(), merged_acc.end(), 0.0) /
         static_cast<double>(merged_acc.size());
}

MergeStudy merge_study(const RunConfig& cfg, const ParamSet& theta_pre, const TaskStream& stream,
                       std::span<const ParamSet> dense_deltas, double mask_rate) {
  if (dense_deltas.size() != stream.size()) {
    throw Error(Errc::InvalidArgument, "one dense delta per task required");
  }
  const auto base = fingerprint(theta_pre);
  MergeStudy out;
  std::vector<SparseDelta> masked;
  for (std::size_t k = 0; k < stream.size(); ++k) {
    ParamSet tuned;
    for (std::size_t t = 0; t < theta_pre.size(); ++t) {
      const auto& e = theta_pre.entries()[t];
      tuned.add(e.name, ew_combine(e.tensor, dense_deltas[k].entries()[t].tensor, Combine::add));
    }
    out.finetuned_acc.push_back(task_ncm_accuracy(cfg, tuned, stream.tasks[k], k));
    masked.push_back(mask_delta(dense_deltas[k], mask_rate, task_seeds(cfg, k).mask, base));
  }
  const auto merged = merge_deltas(theta_pre, masked);
  for (std::size_t k = 0; k < stream.size(); ++k) {
    out.merged_acc.push_back(task_ncm_accuracy(cfg, merged, stream.tasks[k], k));
  }
  return out;
}

}  // namespace sotu
