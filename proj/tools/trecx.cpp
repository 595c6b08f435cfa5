// Command-line front end: train, eval, sweep, flops, params, report.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "trecx/architecture.hpp"
#include "trecx/checkpoint.hpp"
#include "trecx/dataset.hpp"
#include "trecx/evaluation.hpp"
#include "trecx/exit_policy.hpp"
#include "trecx/graph.hpp"
#include "trecx/io.hpp"
#include "trecx/training.hpp"

using namespace trecx;
namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Architecture overrides shared by several subcommands.
struct ArchOverrides {
  std::string ee_variant;
  std::string early_view;
  bool fmap_concat = false;

  void attach(CLI::App* app, bool with_fmap) {
    app->add_option("--ee-variant", ee_variant, "Replace the early-exit variant")
        ->check(CLI::IsMember({"none", "trecx", "baseline_ee"}));
    app->add_option("--early-view", early_view, "Enable or disable the early-view head")
        ->check(CLI::IsMember({"true", "false"}));
    if (with_fmap) app->add_flag("--fmap-concat", fmap_concat, "Build the feature-map concatenation ablation");
  }

  ArchitectureSpec apply(ArchitectureSpec s) const {
    if (!ee_variant.empty()) {
      s.ee_variant = trecx::detail::parse_ee_variant(ee_variant);
      if (s.ee_variant != EeVariant::TRecX && early_view.empty()) s.early_view = false;
    }
    if (!early_view.empty()) s.early_view = early_view == "true";
    if (fmap_concat) s.early_view = false;
    return s;
  }

  BuildOptions options() const {
    BuildOptions o;
    o.fmap_concat = fmap_concat;
    return o;
  }
};

// An architecture file, or a training config whose `architecture` key names one.
ArchitectureSpec load_any_architecture(const std::string& path) {
  const auto text = config::read_file(path);
  const auto root = config::parse(text, path);
  if (root["architecture"]) return load_architecture(load_train_config(path).architecture);
  return parse_architecture(text, path);
}

std::string write_to_string(const std::function<void(std::ostream&)>& fn) {
  std::ostringstream ss;
  fn(ss);
  return ss.str();
}

// "synth:N" or "synth:N:noise" builds synthetic data shaped for `arch`; anything else is a
// CIFAR-10 directory.
Dataset load_data(const std::string& source, const ArchitectureSpec& arch, std::uint64_t seed, bool test_split,
                  std::ostream& log) {
  if (source.rfind("synth:", 0) == 0) {
    std::vector<std::string> parts;
    std::stringstream ss(source.substr(6));
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.empty() || parts.size() > 2) throw UsageError("--data synth:N[:noise] expected, got '" + source + "'");
    SynthOptions o;
    std::size_t n = 0;
    try {
      n = std::stoul(parts[0]);
      if (parts.size() == 2) o.noise = std::stod(parts[1]);
    } catch (const std::exception&) {
      throw UsageError("--data synth:N[:noise] expected, got '" + source + "'");
    }
    o.draw = test_split ? 1 : 0;
    if (arch.input.size() != 3) throw UsageError("synthetic data needs an [h, w, c] model input");
    return synth_dataset(arch.input, arch.num_classes, n, seed, o);
  }
  if (arch.input != std::vector<std::size_t>{32, 32, 3} || arch.num_classes != 10)
    throw UsageError("CIFAR-10 data needs a 32x32x3 input and 10 classes; model '" + arch.name + "' differs");
  log << "loading CIFAR-10 from " << source << std::endl;
  auto c = load_cifar10(source);
  return test_split ? std::move(c.test) : std::move(c.train);
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

void print_flops(std::ostream& out, const std::string& name, const FlopsBreakdown& f, bool has_exit) {
  out << "model: " << name << "\n"
      << "common: " << f.common << "\n"
      << "early_exit: " << f.early_exit << "\n"
      << "final: " << f.final_block << "\n";
  if (has_exit) out << "early_path: " << f.early_path() << "\n";
  out << "final_path: " << f.final_path() << "\n"
      << "total: " << f.total() << "\n";
}

unsigned thread_cap() {
  const char* env = std::getenv("TRECX_THREADS");
  if (!env || !*env) return 1;
  const std::string s(env);
  if (s.find_first_not_of("0123456789") != std::string::npos || std::stoul(s) == 0)
    throw UsageError("TRECX_THREADS must be a positive integer, got '" + s + "'");
  return static_cast<unsigned>(std::stoul(s));
}

ExitCosts costs_from(const std::string& spec_path, const ArchOverrides& ov) {
  const auto spec = ov.apply(load_any_architecture(spec_path));
  const auto m = GraphModel<float>::build(spec, 0, ov.options());
  if (!m.has_early_exit()) throw UsageError("--flops-spec '" + spec_path + "' has no early exit");
  const auto f = m.count_flops();
  return {f.early_path(), f.final_path()};
}

std::vector<EvalRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_records_csv(in, path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-exit tiny CNN toolkit"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint plus history CSV");
  std::string train_config, train_data, train_out, train_history, train_resume;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> train_epochs, train_subset;
  ArchOverrides train_ov;
  train_cmd->add_option("--config", train_config, "Training config file")->required();
  train_cmd->add_option("--data", train_data, "CIFAR-10 directory or synth:N[:noise]")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint output path")->required();
  train_cmd->add_option("--history", train_history, "History CSV path (default <out>.history.csv)");
  train_cmd->add_option("--resume", train_resume, "Continue from this checkpoint");
  train_cmd->add_option("--seed", train_seed, "Override the config seed");
  train_cmd->add_option("--epochs", train_epochs, "Override the config epoch count");
  train_cmd->add_option("--train-subset", train_subset, "Use only the first N training samples");
  train_ov.attach(train_cmd, true);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Write per-sample records for a checkpoint");
  std::string eval_ckpt, eval_data, eval_records, eval_split = "test";
  std::uint64_t eval_seed = 0;
  std::size_t eval_batch = 256;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "CIFAR-10 directory or synth:N[:noise]")->required();
  eval_cmd->add_option("--records", eval_records, "Records CSV output")->required();
  eval_cmd->add_option("--split", eval_split, "Data split")->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--seed", eval_seed, "Seed of synthetic data (match the training run)");
  eval_cmd->add_option("--batch-size", eval_batch, "Inference batch size")->check(CLI::PositiveNumber);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Benefit curve over rho = 0.00 .. 1.00");
  std::string sweep_records, sweep_spec, sweep_out;
  std::vector<std::string> sweep_compare;
  std::optional<double> sweep_baseline;
  ArchOverrides sweep_ov;
  sweep_cmd->add_option("--records", sweep_records, "Records CSV");
  sweep_cmd->add_option("--flops-spec", sweep_spec, "Architecture (or training config) giving the exit costs")
      ->required();
  sweep_cmd->add_option("--out", sweep_out, "Curve CSV output")->required();
  sweep_cmd->add_option("--compare", sweep_compare,
                        "name=records.csv[@spec.yaml]; merges several runs into one long-format CSV");
  sweep_cmd->add_option("--baseline-accuracy", sweep_baseline, "Print FLOPs at 1/2/3% accuracy trade-off");
  sweep_ov.attach(sweep_cmd, true);

  // flops / params
  auto* flops_cmd = app.add_subcommand("flops", "Print the per-block FLOP counts");
  auto* params_cmd = app.add_subcommand("params", "Print the parameter counts");
  std::string count_config;
  ArchOverrides count_ov;
  for (auto* c : {flops_cmd, params_cmd}) {
    c->add_option("--config", count_config, "Architecture or training config")->required();
    count_ov.attach(c, true);
  }

  // report
  auto* report_cmd = app.add_subcommand("report", "Overthinking counts and medium-confidence distributions");
  std::string report_records, report_conf;
  double band_lo = 0.65, band_hi = 0.9;
  report_cmd->add_option("--records", report_records, "Records CSV")->required();
  report_cmd->add_option("--confidence", report_conf, "Confidence CSV output (head,id,confidence)");
  report_cmd->add_option("--band-lo", band_lo, "Lower edge of the band (inclusive)");
  report_cmd->add_option("--band-hi", band_hi, "Upper edge of the band (exclusive)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << std::endl;
    return 2;
  }

  try {
    thread_cap();

    if (*train_cmd) {
      auto cfg = load_train_config(train_config);
      if (train_seed) cfg.seed = *train_seed;
      if (train_epochs) cfg.epochs = *train_epochs;
      if (train_subset) cfg.train_subset = *train_subset;
      cfg.validate();
      const auto spec = train_ov.apply(load_architecture(cfg.architecture));
      auto model = GraphModel<float>::build(spec, cfg.seed, train_ov.options());
      auto state = initial_train_state(cfg);
      if (!train_resume.empty()) state = restore_checkpoint(model, train_resume);
      const auto data = load_data(train_data, spec, cfg.seed, false, std::cerr);
      std::cerr << spec.name << ": " << model.count_params() << " params, " << data.size() << " samples, "
                << cfg.epochs << " epochs" << std::endl;
      TrainHooks<float> hooks;
      hooks.progress = &std::cerr;
      train(model, data, cfg, state, hooks);
      save_checkpoint(model, state, train_out);
      const auto hist = train_history.empty() ? train_out + ".history.csv" : train_history;
      write_file_atomic(hist, write_to_string([&](std::ostream& o) { write_history_csv(o, state.history); }));
      std::cout << "checkpoint: " << train_out << "\nhistory: " << hist << "\n";
    } else if (*eval_cmd) {
      auto ck = load_checkpoint<float>(eval_ckpt);
      const auto data = load_data(eval_data, ck.model.spec(), eval_seed, eval_split == "test", std::cerr);
      const auto recs = collect_records(ck.model, data, eval_batch);
      write_file_atomic(eval_records, write_to_string([&](std::ostream& o) { write_records_csv(o, recs); }));
      std::cout << "records: " << recs.size() << "\n"
                << "acc_early: " << format_g9(standalone_accuracy(recs, Exit::Early)) << "\n"
                << "acc_final: " << format_g9(standalone_accuracy(recs, Exit::Final)) << "\n"
                << "c_early: " << recs.front().costs.early << "\n"
                << "c_final: " << recs.front().costs.final << "\n";
    } else if (*sweep_cmd) {
      if (sweep_records.empty() == sweep_compare.empty())
        throw UsageError("sweep needs exactly one of --records or --compare");
      const auto default_costs = costs_from(sweep_spec, sweep_ov);
      if (!sweep_records.empty()) {
        auto recs = read_records(sweep_records);
        assign_costs(recs, default_costs);
        const auto curve = benefit_curve(recs);
        write_file_atomic(sweep_out, write_to_string([&](std::ostream& o) { write_curve_csv(o, curve); }));
        if (sweep_baseline)
          for (const auto& t : tradeoff_table(curve, *sweep_baseline))
            std::cout << "tradeoff_" << format_g9(t.drop) << ": rho " << format_g9(t.point.rho) << " accuracy "
                      << format_g9(t.point.accuracy) << " flops " << format_g9(t.point.flops) << "\n";
      } else {
        std::vector<NamedCurve> runs;
        for (const auto& arg : sweep_compare) {
          const auto eq = arg.find('=');
          if (eq == std::string::npos || eq == 0) throw UsageError("--compare expects name=records.csv[@spec]");
          std::string path = arg.substr(eq + 1), spec_path;
          if (const auto at = path.find('@'); at != std::string::npos) {
            spec_path = path.substr(at + 1);
            path = path.substr(0, at);
          }
          auto recs = read_records(path);
          assign_costs(recs, spec_path.empty() ? default_costs : costs_from(spec_path, ArchOverrides{}));
          runs.emplace_back(arg.substr(0, eq), benefit_curve(recs));
        }
        write_file_atomic(sweep_out, write_to_string([&](std::ostream& o) { compare_runs(o, runs); }));
      }
      std::cout << "curve: " << sweep_out << "\n";
    } else if (*flops_cmd || *params_cmd) {
      const auto spec = count_ov.apply(load_any_architecture(count_config));
      const auto m = GraphModel<float>::build(spec, 0, count_ov.options());
      if (*flops_cmd) {
        print_flops(std::cout, spec.name, m.count_flops(), m.has_early_exit());
      } else {
        std::cout << "model: " << spec.name << "\n"
                  << "total: " << m.count_params() << "\n"
                  << "trainable: " << m.count_trainable_params() << "\n"
                  << "common: " << m.count_params(Block::Common) << "\n"
                  << "early_exit: " << m.count_params(Block::EarlyExit) << "\n"
                  << "final: " << m.count_params(Block::Final) << "\n";
      }
    } else if (*report_cmd) {
      const auto recs = read_records(report_records);
      const auto rep = overthinking_report(recs);
      std::cout << "records: " << recs.size() << "\n"
                << "early_correct_final_wrong: " << rep.early_correct_final_wrong << "\n"
                << "early_wrong_final_correct: " << rep.early_wrong_final_correct << "\n"
                << "both_correct: " << rep.both_correct << "\n"
                << "both_wrong: " << rep.both_wrong << "\n";
      const ConfidenceBand band{band_lo, band_hi};
      std::ostringstream csv;
      csv << "head,id,confidence\n";
      for (Exit h : {Exit::Early, Exit::Final}) {
        const auto d = confidence_distribution(recs, h, band);
        const std::string name = to_string(h);
        std::cout << name << "_band_count: " << d.count << "\n"
                  << name << "_band_q1: " << format_g9(d.q1) << "\n"
                  << name << "_band_median: " << format_g9(d.median) << "\n"
                  << name << "_band_q3: " << format_g9(d.q3) << "\n";
        for (const auto& r : recs) {
          const double c = max_value(r.head(h));
          if (c >= band.lo && c < band.hi) csv << name << ',' << r.id << ',' << format_g9(c) << '\n';
        }
      }
      if (!report_conf.empty()) write_file_atomic(report_conf, csv.str());
    }
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << std::endl;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "error: checkpoint: " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const CsvError& e) {
    std::cerr << "error: csv: " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const TrainingError& e) {
    std::cerr << "error: training: " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << std::endl;
    return 1;
  }
  return 0;
}
