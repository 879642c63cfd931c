// rwkvts: train, evaluate and inspect patch-based RWKV forecasters.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rwkvts/cli.hpp"

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string precision;
    std::string mode;
    std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "key = value configuration file");
    cmd->add_option("--seed", f.seed, "override seed");
    cmd->add_option("--precision", f.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--mode", f.mode, "parallel or recurrent")->check(CLI::IsMember({"parallel", "recurrent"}));
    cmd->add_option("--out", f.out, "output path");
}

rwkvts::RunConfig resolve(const CommonFlags& f) {
    rwkvts::RunConfig cfg = f.config.empty() ? rwkvts::RunConfig{} : rwkvts::load_run_config(f.config);
    if (f.seed) cfg.model.seed = cfg.train.seed = *f.seed;
    if (!f.precision.empty()) cfg.model.precision = rwkvts::parse_precision(f.precision);
    if (!f.mode.empty()) cfg.model.mode = rwkvts::parse_mode(f.mode);
    if (!f.out.empty()) cfg.out = f.out;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace rwkvts;
    CLI::App app{"rwkvts: RWKV time-series forecaster"};
    app.require_subcommand(1);

    CommonFlags train_f;
    std::vector<std::string> sets;
    auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
    add_common(train, train_f);
    train->add_option("--set", sets, "extra key=value overrides");

    CommonFlags eval_f;
    std::string eval_ckpt, eval_data;
    auto* evaluate = app.add_subcommand("evaluate", "test-split MSE and MAE of a checkpoint");
    evaluate->add_option("checkpoint", eval_ckpt)->required();
    evaluate->add_option("--data", eval_data, "CSV to evaluate on (default: the training data)");
    evaluate->add_option("--mode", eval_f.mode)->check(CLI::IsMember({"parallel", "recurrent"}));
    evaluate->add_option("--out", eval_f.out, "also write the metrics line here");

    CommonFlags pred_f;
    std::string pred_ckpt, pred_input;
    auto* predict = app.add_subcommand("predict", "forecast the horizon after a CSV history");
    predict->add_option("checkpoint", pred_ckpt)->required();
    predict->add_option("input", pred_input, "CSV whose last input_len rows are the history")->required();
    predict->add_option("--out", pred_f.out, "output CSV (default: stdout)");
    predict->add_option("--mode", pred_f.mode)->check(CLI::IsMember({"parallel", "recurrent"}));

    CommonFlags bench_f;
    cli::BenchOptions bench_opt;
    auto* bench = app.add_subcommand("bench", "latency and memory scaling over patch counts");
    add_common(bench, bench_f);
    bench->add_option("--lengths", bench_opt.lengths, "patch counts, strictly increasing");
    bench->add_option("--repeats", bench_opt.latency.repeats, "timed repeats per length (>= 5)");
    bench->add_flag("--backward", bench_opt.with_backward, "time forward+backward");
    bench->add_option("--json", bench_opt.json_out, "write the report as JSON");

    CommonFlags eq_f;
    std::size_t eq_trials = 50;
    std::optional<double> eq_tol;
    auto* equiv = app.add_subcommand("check-equivalence", "parallel vs recurrent agreement");
    add_common(equiv, eq_f);
    equiv->add_option("--trials", eq_trials);
    equiv->add_option("--tolerance", eq_tol, "default 1e-9 (f64) or 1e-4 (f32)");

    CommonFlags gc_f;
    std::string corrupt_op;
    auto* grads = app.add_subcommand("check-gradients", "finite-difference gradient check");
    add_common(grads, gc_f);
    grads->add_option("--corrupt-op", corrupt_op)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::exit_ok : cli::exit_usage;
    }

    return cli::guarded(
        [&]() -> int {
            if (*train) {
                RunConfig cfg = resolve(train_f);
                for (const auto& s : sets) {
                    const auto eq = s.find('=');
                    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
                    set_config_value(cfg, detail::trim(std::string_view(s).substr(0, eq)), std::string_view(s).substr(eq + 1));
                }
                return cli::cmd_train(cfg, std::cout);
            }
            if (*evaluate) {
                std::optional<ExecMode> mode;
                if (!eval_f.mode.empty()) mode = parse_mode(eval_f.mode);
                return cli::cmd_evaluate(eval_ckpt, eval_data, mode, eval_f.out, std::cout);
            }
            if (*predict) {
                std::optional<ExecMode> mode;
                if (!pred_f.mode.empty()) mode = parse_mode(pred_f.mode);
                return cli::cmd_predict(pred_ckpt, pred_input, pred_f.out, mode, std::cout);
            }
            if (*bench) {
                RunConfig cfg = resolve(bench_f);
                if (!bench_f.out.empty() && bench_opt.json_out.empty()) bench_opt.json_out = bench_f.out;
                return cli::cmd_bench(cfg, bench_opt, std::cout);
            }
            if (*equiv) {
                const RunConfig cfg = resolve(eq_f);
                const Precision p = eq_f.precision.empty() ? Precision::f64 : cfg.model.precision;
                const double tol = eq_tol ? *eq_tol : (p == Precision::f64 ? 1e-9 : 1e-4);
                return cli::cmd_check_equivalence(eq_trials, tol, p, cfg.model.seed, std::cout);
            }
            const RunConfig cfg = resolve(gc_f);
            return cli::cmd_check_gradients(cfg.model.seed, corrupt_op, std::cout);
        },
        std::cerr);
}
