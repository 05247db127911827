#include "sotu/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "sotu/attention_probe.hpp"
#include "sotu/checkpoint_io.hpp"
#include "sotu/classifier.hpp"
#include "sotu/delta_ops.hpp"
#include "sotu/harness.hpp"
#include "sotu/rng.hpp"
#include "sotu/trainer.hpp"

namespace sotu {

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kModelKeys{"input_dim", "hidden_dims", "embed_dim", "activation"};
const std::vector<std::string> kFinetuneKeys{"activation", "learning_rate", "epochs", "batch_size"};
const std::vector<std::string> kPretrainKeys{
    "input_dim",   "hidden_dims",     "embed_dim",      "activation",      "seed",
    "batch_size",  "pretrain_learning_rate", "pretrain_epochs", "stream_seed",
    "num_classes", "base_classes",    "latent_dim",     "base_latent_dims",     "train_per_class", "test_per_class",
    "separation",  "noise"};
const std::vector<std::string> kPrototypeKeys{"activation", "projection", "projection_out_dim",
                                              "projection_seed", "projection_nonlinearity",
                                              "buffer_per_class"};

/// Config-key flags layered over an optional --config file.
class ConfigFlags {
 public:
  void attach(CLI::App* app, const std::vector<std::string>& keys) {
    app->add_option("--config", config_path_, "flat key = value config file");
    const RunConfig defaults;
    for (const auto& k : keys) {
      auto& slot = values_[k];
      auto* opt = app->add_option("--" + k, slot, config_help(k));
      opt->default_str(get_config_value(defaults, k));
      opts_.emplace_back(k, opt);
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path_.empty()) {
      for (const auto& [k, v] : read_config_file(config_path_)) set_config_value(cfg, k, v);
    }
    for (const auto& [k, opt] : opts_) {
      if (opt->count() > 0) set_config_value(cfg, k, values_.at(k));
    }
    return cfg;
  }

 private:
  std::string config_path_;
  std::map<std::string, std::string> values_;
  std::vector<std::pair<std::string, CLI::Option*>> opts_;
};

std::vector<SparseDelta> load_deltas(const std::vector<std::string>& paths) {
  std::vector<SparseDelta> out;
  for (const auto& p : paths) out.push_back(load_sparse_delta(p));
  return out;
}

std::optional<Projection> projection_for(const RunConfig& cfg, const ParamSet& backbone) {
  auto spec = cfg.projection_spec();
  if (!spec) return std::nullopt;
  return build_projection(*spec, backbone_embed_dim(backbone));
}

std::vector<double> parse_rates(const std::string& s) {
  std::vector<double> rates;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(part, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != part.size()) throw Error(Errc::InvalidArgument, "bad rate '" + part + "'");
    if (!(v >= 0.0 && v <= 1.0)) throw Error(Errc::InvalidProbability, "rate " + part + " outside [0,1]");
    rates.push_back(v);
  }
  if (rates.empty()) throw Error(Errc::InvalidArgument, "no rates given");
  return rates;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse orthogonal task-delta merging for continual learning", "sotu"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // pretrain
  ConfigFlags pretrain_flags;
  std::string pretrain_data, pretrain_out;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "train the base backbone on pretraining classes");
  pretrain_flags.attach(pretrain_cmd, kPretrainKeys);
  pretrain_cmd->add_option("--data", pretrain_data, "pretraining CSV (default: synthetic base classes)");
  pretrain_cmd->add_option("--out", pretrain_out, "output .sotu")->required();

  // finetune
  ConfigFlags finetune_flags;
  std::string ft_base, ft_data, ft_out, ft_head_out;
  std::uint64_t ft_seed = 0;
  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune the base backbone on one task");
  finetune_flags.attach(finetune_cmd, kFinetuneKeys);
  finetune_cmd->add_option("--base", ft_base, "pretrained .sotu")->required();
  finetune_cmd->add_option("--data", ft_data, "task training CSV")->required();
  finetune_cmd->add_option("--seed", ft_seed, "task seed (head init and shuffling)")->default_val(0);
  finetune_cmd->add_option("--out", ft_out, "fine-tuned backbone .sotu")->required();
  finetune_cmd->add_option("--head-out", ft_head_out, "optional .sotu for the discardable head");

  // delta
  std::string d_ft, d_base, d_out;
  auto* delta_cmd = app.add_subcommand("delta", "fine-tuned minus base parameters");
  delta_cmd->add_option("--ft", d_ft, "fine-tuned .sotu")->required();
  delta_cmd->add_option("--base", d_base, "pretrained .sotu")->required();
  delta_cmd->add_option("--out", d_out, "dense delta .sotu")->required();

  // mask
  std::string m_in, m_base, m_out;
  double m_p = 0.9;
  std::uint64_t m_seed = 0;
  auto* mask_cmd = app.add_subcommand("mask", "Bernoulli-mask a dense delta into a sparse delta");
  mask_cmd->add_option("--in", m_in, "dense delta .sotu")->required();
  mask_cmd->add_option("--base", m_base, "pretrained .sotu the delta was computed against")->required();
  mask_cmd->add_option("--p", m_p, "probability of zeroing a coordinate")->default_val(0.9);
  mask_cmd->add_option("--seed", m_seed, "mask seed")->default_val(0);
  mask_cmd->add_option("--out", m_out, "output .sdelta")->required();

  // merge
  std::string mg_base, mg_out;
  std::vector<std::string> mg_deltas;
  auto* merge_cmd = app.add_subcommand("merge", "add sparse deltas onto the base model");
  merge_cmd->add_option("--base", mg_base, "pretrained .sotu")->required();
  merge_cmd->add_option("--deltas", mg_deltas, "sparse deltas (.sdelta), merged in order");
  merge_cmd->add_option("--out", mg_out, "merged .sotu")->required();

  // similarity / collisions
  std::vector<std::string> sim_deltas, col_deltas;
  std::string sim_out, col_out;
  auto* sim_cmd = app.add_subcommand("similarity", "pairwise cosine similarity of sparse deltas");
  sim_cmd->add_option("--deltas", sim_deltas, "sparse deltas (.sdelta)")->required();
  sim_cmd->add_option("--out", sim_out, "output CSV")->required();
  auto* col_cmd = app.add_subcommand("collisions", "coordinate overlap between sparse deltas");
  col_cmd->add_option("--deltas", col_deltas, "sparse deltas (.sdelta)")->required();
  col_cmd->add_option("--out", col_out, "output CSV")->required();

  // prototypes
  ConfigFlags proto_flags;
  std::string pr_model, pr_data, pr_in, pr_out;
  std::uint64_t pr_seed = 0;
  auto* proto_cmd = app.add_subcommand("prototypes", "add class-mean prototypes for a task");
  proto_flags.attach(proto_cmd, kPrototypeKeys);
  proto_cmd->add_option("--model", pr_model, "backbone .sotu")->required();
  proto_cmd->add_option("--data", pr_data, "task training CSV")->required();
  proto_cmd->add_option("--protos-in", pr_in, "existing .protos to extend");
  proto_cmd->add_option("--seed", pr_seed, "buffer selection seed")->default_val(0);
  proto_cmd->add_option("--out", pr_out, "output .protos")->required();

  // evaluate
  ConfigFlags eval_flags;
  std::string ev_model, ev_protos, ev_out;
  std::vector<std::string> ev_data;
  auto* eval_cmd = app.add_subcommand("evaluate", "nearest-class-mean accuracy on test CSVs");
  eval_flags.attach(eval_cmd, {"activation"});
  eval_cmd->add_option("--model", ev_model, "backbone .sotu")->required();
  eval_cmd->add_option("--protos", ev_protos, ".protos file")->required();
  eval_cmd->add_option("--data", ev_data, "test CSVs, pooled")->required();
  eval_cmd->add_option("--out", ev_out, "optional file for the accuracy value");

  // run / sweep
  ConfigFlags run_flags, sweep_flags;
  auto* run_cmd = app.add_subcommand("run", "full pipeline over a task stream");
  run_flags.attach(run_cmd, config_keys());
  std::string sweep_rates = "1,0.9,0.8,0.7,0.5,0.3,0.1";
  auto* sweep_cmd = app.add_subcommand("sweep", "full pipeline at several mask rates");
  sweep_flags.attach(sweep_cmd, config_keys());
  sweep_cmd->add_option("--rates", sweep_rates, "comma-separated mask rates")->capture_default_str();

  // probe-attention
  std::size_t pa_tokens = 8, pa_dim = 16, pa_dk = 8, pa_instances = 1000, pa_trials = 50;
  double pa_max_change = 0.1, pa_delta_scale = 0.5;
  std::uint64_t pa_seed = 0;
  std::string pa_rates = "0,0.5,0.9,0.95,1", pa_out;
  auto* probe_cmd = app.add_subcommand("probe-attention", "attention perturbation bound and mask stability");
  probe_cmd->add_option("--tokens", pa_tokens, "tokens per instance")->capture_default_str();
  probe_cmd->add_option("--dim", pa_dim, "input dimension")->capture_default_str();
  probe_cmd->add_option("--dk", pa_dk, "key/query dimension")->capture_default_str();
  probe_cmd->add_option("--instances", pa_instances, "random instances for the bound check")->capture_default_str();
  probe_cmd->add_option("--max-score-change", pa_max_change, "largest |s' - s| per instance")->capture_default_str();
  probe_cmd->add_option("--rates", pa_rates, "mask rates for the stability report")->capture_default_str();
  probe_cmd->add_option("--trials", pa_trials, "masks per rate")->capture_default_str();
  probe_cmd->add_option("--delta-scale", pa_delta_scale, "fine-tuning delta size relative to weights")->capture_default_str();
  probe_cmd->add_option("--seed", pa_seed, "seed")->capture_default_str();
  probe_cmd->add_option("--out", pa_out, "stability CSV");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << "run 'sotu " << (subs.empty() ? std::string() : subs.front()->get_name() + " ")
        << "--help' for usage\n";
    return 1;
  }

  try {
    if (pretrain_cmd->parsed()) {
      auto cfg = pretrain_flags.resolve();
      std::optional<LabeledDataset> base;
      if (!pretrain_data.empty()) {
        base = load_dataset_csv(pretrain_data);
      } else {
        auto spec = cfg.data;
        spec.input_dim = cfg.model.input_dim;
        base = make_synthetic(spec, cfg.stream_seed).base_train;
      }
      const auto pre = pretrain(cfg, base);
      save_paramset(pre, pretrain_out);
      out << "wrote " << pretrain_out << " fingerprint=" << fingerprint(pre).hex() << "\n";
    } else if (finetune_cmd->parsed()) {
      auto cfg = finetune_flags.resolve();
      const auto pre = load_paramset(ft_base);
      const auto data = load_dataset_csv(ft_data);
      const auto res = finetune_with_head(cfg, pre, data, ft_seed);
      save_paramset(res.backbone, ft_out);
      if (!ft_head_out.empty()) save_paramset(res.head, ft_head_out);
      out << "wrote " << ft_out << " train_acc="
          << fmt(head_accuracy(with_head(res.backbone, res.head), cfg.model.activation, data)) << "\n";
    } else if (delta_cmd->parsed()) {
      save_paramset(compute_delta(load_paramset(d_ft), load_paramset(d_base)), d_out);
      out << "wrote " << d_out << "\n";
    } else if (mask_cmd->parsed()) {
      const auto base = load_paramset(m_base);
      const auto delta = load_paramset(m_in);
      require_same_layout(delta, base);
      const auto sd = mask_delta(delta, m_p, m_seed, fingerprint(base));
      save_sparse_delta(sd, m_out);
      out << "wrote " << m_out << " kept=" << sd.num_kept() << "/" << sd.num_coordinates() << "\n";
    } else if (merge_cmd->parsed()) {
      const auto merged = merge_deltas(load_paramset(mg_base), load_deltas(mg_deltas));
      save_paramset(merged, mg_out);
      out << "wrote " << mg_out << "\n";
    } else if (sim_cmd->parsed()) {
      write_matrix_csv(delta_cosine_matrix(load_deltas(sim_deltas)), sim_out);
      out << "wrote " << sim_out << "\n";
    } else if (col_cmd->parsed()) {
      const auto rep = collision_report(load_deltas(col_deltas));
      write_collisions_csv(rep, col_out);
      out << "wrote " << col_out << " multi_collision_rate=" << fmt(rep.multi_collision_rate) << "\n";
    } else if (proto_cmd->parsed()) {
      auto cfg = proto_flags.resolve();
      const auto model = load_paramset(pr_model);
      const auto data = load_dataset_csv(pr_data);
      PrototypeSet protos;
      if (!pr_in.empty()) protos = load_prototypes(pr_in);
      const auto proj = projection_for(cfg, model);
      build_prototypes(protos, model, cfg.model.activation, data, cfg.buffer_per_class,
                       proj ? &*proj : nullptr, pr_seed);
      save_prototypes(protos, pr_out);
      out << "wrote " << pr_out << " classes=" << protos.size() << "\n";
    } else if (eval_cmd->parsed()) {
      auto cfg = eval_flags.resolve();
      const auto model = load_paramset(ev_model);
      const auto protos = load_prototypes(ev_protos);
      std::vector<LabeledDataset> parts;
      for (const auto& p : ev_data) parts.push_back(load_dataset_csv(p));
      const auto pooled = concat(parts);
      std::optional<Projection> proj;
      if (protos.projection()) proj = build_projection(*protos.projection(), backbone_embed_dim(model));
      const double acc = ncm_accuracy(protos, model, cfg.model.activation, proj ? &*proj : nullptr, pooled);
      out << "accuracy=" << fmt(acc) << "\n";
      if (!ev_out.empty()) {
        std::ofstream f(ev_out, std::ios::trunc);
        if (!f) throw Error(Errc::Io, "cannot open '" + ev_out + "' for writing");
        f << fmt(acc) << "\n";
      }
    } else if (run_cmd->parsed()) {
      auto cfg = run_flags.resolve();
      const auto res = run_experiment(cfg);
      for (std::size_t k = 0; k < res.metrics.R.size(); ++k) {
        out << "R_" << k + 1 << "=" << fmt(res.metrics.R[k]) << "\n";
      }
      out << "avg_acc=" << fmt(res.metrics.avg_acc) << " final_acc=" << fmt(res.metrics.final_acc) << "\n";
    } else if (sweep_cmd->parsed()) {
      auto cfg = sweep_flags.resolve();
      const auto rates = parse_rates(sweep_rates);
      auto data = prepare_data(cfg);
      const auto pre = pretrain(cfg, data.base_train);
      const auto rows = sweep_mask_rate(cfg, pre, data.stream, rates);
      const fs::path dir = cfg.output_dir.empty() ? fs::path(".") : cfg.output_dir;
      fs::create_directories(dir);
      write_sweep_csv(rows, dir / "sweep.csv");
      write_sweep_svg(rows, dir / "sweep.svg");
      for (const auto& r : rows) {
        out << "p=" << r.mask_rate << " avg_acc=" << fmt(r.avg_acc) << " final_acc=" << fmt(r.final_acc)
            << " status=" << r.status << "\n";
      }
      out << "wrote " << (dir / "sweep.csv").string() << " and sweep.svg\n";
    } else if (probe_cmd->parsed()) {
      const auto rates = parse_rates(pa_rates);
      double worst = 0.0;
      for (std::size_t i = 0; i < pa_instances; ++i) {
        const auto inst = random_attention_instance(pa_tokens, pa_dim, pa_dk, pa_max_change, derive_seed(pa_seed, i));
        worst = std::max(worst, perturbation_bound_check(inst).max_violation);
      }
      out << "bound_check instances=" << pa_instances << " max_violation=" << fmt(worst) << "\n";
      const auto probe = random_mask_probe(pa_tokens, pa_dim, pa_dk, pa_delta_scale, derive_seed(pa_seed, 0xa77e));
      std::vector<StabilitySummary> reports;
      for (double p : rates) {
        reports.push_back(mask_stability_report(probe, p, pa_seed, pa_trials));
        out << "p=" << p << " mean_max_rel_change=" << fmt(reports.back().mean)
            << " max=" << fmt(reports.back().max) << "\n";
      }
      if (!pa_out.empty()) write_stability_csv(reports, pa_out);
      if (worst > 1e-9) {
        err << "error: attention bound violated beyond rounding (" << fmt(worst) << ")\n";
        return 2;
      }
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.code() == Errc::Internal ? 2 : 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace sotu
