// Command-line entry point: generate, train, eval, ablate, gradcheck and dump.

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "imn/imn.hpp"

namespace {

using namespace imn;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value run configuration");
  cmd->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "seed for the market and training");
  cmd->add_option("--out", c.out, "output path");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

std::string pick(const std::string& flag, const std::string& configured, const char* what) {
  const std::string& p = flag.empty() ? configured : flag;
  if (p.empty()) throw ContractError(std::string("no ") + what + " given");
  return p;
}

// Writes to `path`, or to stdout when it is empty.
template <class F>
void emit(const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  write(out);
}

int cmd_generate(const Common& c) {
  const RunConfig cfg = resolve(c);
  const std::string out = pick(c.out, cfg.data_path, "output path (--out or paths.data)");
  const auto result = generate_market(cfg.market_config());
  for (const auto& w : result.trace.warnings) std::cerr << "warning: " << w << '\n';
  save_log(out, result.log);
  std::cout << "events " << result.log.events.size() << " purchases "
            << result.trace.purchases.size() << " ratio "
            << detail::format_double(purchase_ratio(result.log)) << '\n';
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string report;
  bool resume = false;
  int max_epochs = -1;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const RunConfig cfg = resolve(c);
  const std::string data = pick(a.data, cfg.data_path, "data path (--data or paths.data)");
  const std::string out = pick(c.out, cfg.checkpoint_path, "checkpoint path (--out or paths.checkpoint)");
  TrainOptions opt;
  opt.checkpoint_path = out;
  opt.max_epochs_this_run = a.max_epochs;
  opt.on_epoch = [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " loss " << detail::format_double(r.train_loss)
              << " val_ndcg@10 " << detail::format_double(r.val_ndcg10) << std::endl;
  };
  TrainingCheckpoint ck;
  if (a.resume) {
    const auto previous = load_checkpoint(out);
    const PreparedLog log = prepare_log(load_log(data), previous.norm);
    ck = resume_training(previous, log, opt);
  } else {
    const PreparedLog log = prepare_log(load_log(data));
    ck = train(cfg.train_config(), log, opt);
  }
  const std::string report = a.report.empty() ? cfg.report_path : a.report;
  if (!report.empty()) emit(report, [&](std::ostream& os) { write_epoch_report(os, ck.history); });
  std::cout << "best epoch " << ck.best.epoch << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_flag) {
  const RunConfig cfg = resolve(c);
  const auto ck = load_checkpoint(pick(checkpoint, cfg.checkpoint_path, "checkpoint (--checkpoint)"));
  const PreparedLog log = prepare_log(load_log(pick(data_flag, cfg.data_path, "data path (--data)")), ck.norm);
  const auto m = evaluate_checkpoint(ck, log);
  const auto name = variant_name(ck.config.variant);
  emit(c.out.empty() ? cfg.metrics_path : c.out, [&](std::ostream& os) {
    os << kMetricsHeader << '\n';
    write_metrics_row(os, name, "validation", m.validation, ck.config.seed);
    write_metrics_row(os, name, "test", m.test, ck.config.seed);
  });
  return 0;
}

int cmd_ablate(const Common& c, const std::string& data_flag) {
  const RunConfig cfg = resolve(c);
  const PreparedLog log = prepare_log(load_log(pick(data_flag, cfg.data_path, "data path (--data)")));
  const auto rows = run_ablation(cfg.train_config(), cfg.ablation_variants, cfg.ablation_seeds, log,
                                 [](const AblationRow& r) {
                                   std::cerr << variant_name(r.variant) << " seed " << r.seed
                                             << " test ndcg@10 "
                                             << detail::format_double(r.metrics.test.ndcg10) << '\n';
                                 });
  emit(c.out.empty() ? cfg.metrics_path : c.out,
       [&](std::ostream& os) { write_ablation_table(os, rows); });
  for (Variant v : cfg.ablation_variants) {
    std::cerr << "median " << variant_name(v) << ' '
              << detail::format_double(median_test_ndcg10(rows, v)) << '\n';
  }
  return 0;
}

int cmd_gradcheck(const Common& c, Index dim) {
  const RunConfig cfg = resolve(c);
  const auto r = toy_event_gradcheck(cfg.seed, cfg.train.variant, dim, cfg.gradcheck_step);
  emit(c.out, [&](std::ostream& os) {
    os << "entries " << r.entries_checked << " max_rel_err " << r.max_rel_err << " worst "
       << r.worst_param << '(' << r.worst_row << ',' << r.worst_col << ") analytic "
       << r.worst_analytic << " numeric " << r.worst_numeric << '\n';
  });
  if (r.max_rel_err > 1e-4) throw NumericError("gradient check failed in " + r.worst_param);
  return 0;
}

int cmd_dump(const Common& c, const std::string& checkpoint, const std::string& data_flag,
             std::optional<Index> k, const std::string& split) {
  const RunConfig cfg = resolve(c);
  const auto ck = load_checkpoint(pick(checkpoint, cfg.checkpoint_path, "checkpoint (--checkpoint)"));
  const PreparedLog log = prepare_log(load_log(pick(data_flag, cfg.data_path, "data path (--data)")), ck.norm);
  ModelParams m = restore_params(ck.dims, ck.best.params);
  DynamicState s = ck.best.state;
  const auto opt = ck.config.scoring();
  EventRange range = log.split.validation;
  if (split == "test") {
    replay_range(m, s, log, log.split.validation, opt.resource_branch);
    range = log.split.test;
  } else if (split != "validation") {
    throw ContractError("--split must be validation or test, got '" + split + "'");
  }
  const auto rows = dump_predictions(m, s, log, range, k.value_or(cfg.dump_k), opt);
  emit(c.out.empty() ? cfg.predictions_path : c.out,
       [&](std::ostream& os) { write_predictions(os, rows); });
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inventory- and budget-aware next-item recommender"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, ablate_c, grad_c, dump_c;
  auto* gen = app.add_subcommand("generate", "write a synthetic marketplace log");
  add_common(gen, gen_c);

  TrainArgs train_a;
  auto* tr = app.add_subcommand("train", "train and write a checkpoint");
  add_common(tr, train_c);
  tr->add_option("--data", train_a.data, "interaction CSV");
  tr->add_option("--report", train_a.report, "per-epoch CSV");
  tr->add_flag("--resume", train_a.resume, "continue from the checkpoint at --out");
  tr->add_option("--max-epochs", train_a.max_epochs, "stop after this many epochs in this run");

  std::string eval_ck, eval_data;
  auto* ev = app.add_subcommand("eval", "validation and test metrics of a checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", eval_ck, "checkpoint file");
  ev->add_option("--data", eval_data, "interaction CSV");

  std::string ablate_data;
  auto* ab = app.add_subcommand("ablate", "train each configured variant and seed");
  add_common(ab, ablate_c);
  ab->add_option("--data", ablate_data, "interaction CSV");

  Index grad_dim = 8;
  auto* gc = app.add_subcommand("gradcheck", "check gradients on a three-user toy log");
  add_common(gc, grad_c);
  gc->add_option("--dim", grad_dim, "embedding width of the toy model");

  std::string dump_ck, dump_data, dump_split = "test";
  std::optional<Index> dump_k;
  auto* dp = app.add_subcommand("dump", "top-k predictions per event");
  add_common(dp, dump_c);
  dp->add_option("--checkpoint", dump_ck, "checkpoint file");
  dp->add_option("--data", dump_data, "interaction CSV");
  dp->add_option("--k", dump_k, "predictions per event");
  dp->add_option("--split", dump_split, "validation or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_c);
    if (tr->parsed()) return cmd_train(train_c, train_a);
    if (ev->parsed()) return cmd_eval(eval_c, eval_ck, eval_data);
    if (ab->parsed()) return cmd_ablate(ablate_c, ablate_data);
    if (gc->parsed()) return cmd_gradcheck(grad_c, grad_dim);
    if (dp->parsed()) return cmd_dump(dump_c, dump_ck, dump_data, dump_k, dump_split);
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 1;
}
