#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "rwkvts/checkpoint.hpp"
#include "rwkvts/cli.hpp"

using namespace rwkvts;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    const fs::path d = fs::path(RWKVTS_TEST_TMP) / "cli";
    fs::create_directories(d);
    return d;
}

std::string error_of(const std::string& text) {
    try {
        std::istringstream in(text);
        parse_run_config(in, "t.cfg").validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

/// Runs the CLI binary; returns its exit status and captures stdout.
int run_cli(const std::string& args, std::string* output = nullptr) {
    const fs::path out = tmp_dir() / "stdout.txt";
    const std::string cmd = std::string(RWKVTS_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (output) {
        std::ifstream f(out);
        *output = std::string(std::istreambuf_iterator<char>(f), {});
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_sine_csv(const std::string& name, std::size_t rows = 600) {
    const fs::path p = tmp_dir() / name;
    write_csv(p.string(), synthetic_sine(rows, 24.0, 2));
    return p;
}

RunConfig small_run(const fs::path& data, const fs::path& out) {
    RunConfig c;
    c.model.input_len = 48;
    c.model.horizon = 12;
    c.model.patch_len = 8;
    c.model.stride = 8;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.n_layers = 1;
    c.model.precision = Precision::f64;
    c.data = data.string();
    c.train.epochs = 2;
    c.train.lr = 1e-3;
    c.out = out.string();
    return c;
}

}  // namespace

TEST(Config, ParsesKeysAndComments) {
    std::istringstream in("# comment\ninput_len = 64\nd_model=32 # trailing\nmode = recurrent\nsplit = fractions:0.6,0.2,0.2\n");
    const RunConfig c = parse_run_config(in);
    EXPECT_EQ(c.model.input_len, 64u);
    EXPECT_EQ(c.model.d_model, 32u);
    EXPECT_EQ(c.model.mode, ExecMode::recurrent);
    EXPECT_EQ(c.split_rule().kind, SplitRule::Kind::fractions);
    EXPECT_DOUBLE_EQ(c.split_rule().train, 0.6);
}

TEST(Config, ErrorsNameTheProblem) {
    EXPECT_NE(error_of("bogus = 1\n").find("bogus"), std::string::npos);
    EXPECT_NE(error_of("lr = 1\nlr = 2\n").find("repeats line 1"), std::string::npos);
    EXPECT_NE(error_of("d_model = 10\nn_heads = 3\n"), "");
    EXPECT_NE(error_of("input_len = 8\npatch_len = 16\n"), "");
    EXPECT_NE(error_of("n_layers = 0\n").find("n_layers"), std::string::npos);
    EXPECT_NE(error_of("epochs = -1\n"), "");
    EXPECT_NE(error_of("precision = f16\n"), "");
    EXPECT_NE(error_of("just a line\n").find("t.cfg:1"), std::string::npos);
    EXPECT_THROW(load_run_config("/nonexistent/x.cfg"), IoError);
}

TEST(Config, FormatParsesBack) {
    RunConfig c;
    c.model.d_model = 64;
    c.train.lr = 3.5e-4;
    c.data = "a/b.csv";
    std::istringstream in(format_run_config(c));
    EXPECT_EQ(config_entries(parse_run_config(in)), config_entries(c));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    for (Precision payload : {Precision::f32, Precision::f64}) {
        RunConfig cfg = small_run("x.csv", "y");
        const auto p = init_params<double>(cfg.model, 3, {.randomize_all = true});
        const Standardizer sc{{1.5, -2}, {0.5, 3}};
        const std::string a = serialize_checkpoint(p, cfg, payload, sc);
        const Checkpoint ck = parse_checkpoint(a);
        EXPECT_EQ(ck.payload_precision, payload);
        ASSERT_TRUE(ck.scaler.has_value());
        EXPECT_EQ(ck.scaler->std, sc.std);
        const std::string b = serialize_checkpoint(ck.params, ck.config, ck.payload_precision, ck.scaler);
        EXPECT_EQ(a, b);
        if (payload == Precision::f64) {
            EXPECT_EQ(ck.params.w_embed, p.w_embed);
        }
    }
}

TEST(Checkpoint, CorruptionIsRejected) {
    RunConfig cfg = small_run("x.csv", "y");
    const auto p = init_params<double>(cfg.model, 4);
    const std::string good = serialize_checkpoint(p, cfg, Precision::f32);

    std::string flipped = good;
    flipped[flipped.size() - 3] ^= 0x10;
    EXPECT_THROW(parse_checkpoint(flipped), DataError);

    EXPECT_THROW(parse_checkpoint(good.substr(0, good.size() - 4)), DataError);
    EXPECT_THROW(parse_checkpoint("NOTACKPT\n"), DataError);

    const auto pos = good.find("tensor head.b");
    ASSERT_NE(pos, std::string::npos);
    std::string missing = good;
    missing.erase(pos, good.find('\n', pos) - pos + 1);
    try {
        parse_checkpoint(missing, "m.ckpt");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("m.ckpt"), std::string::npos);
    }
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
    const fs::path path = tmp_dir() / "rt.ckpt";
    RunConfig cfg = small_run("x.csv", path);
    const auto p = init_params<double>(cfg.model, 5);
    save_checkpoint(path.string(), p, cfg, Precision::f64);
    EXPECT_EQ(load_checkpoint(path.string()).params.w_embed, p.w_embed);
    EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
    EXPECT_THROW(load_checkpoint((tmp_dir() / "none.ckpt").string()), IoError);
}

TEST(Commands, MissingDatasetExitsWithIoCodeAndWritesNothing) {
    const fs::path ck = tmp_dir() / "missing.ckpt";
    fs::remove(ck);
    const int code = run_cli("train --set data=" + (tmp_dir() / "nope.csv").string() + " --out " + ck.string());
    EXPECT_EQ(code, cli::exit_io);
    EXPECT_FALSE(fs::exists(ck));
}

TEST(Commands, BadConfigExitsWithConfigCode) {
    const fs::path cfg = tmp_dir() / "bad.cfg";
    std::ofstream(cfg) << "d_model = 10\nn_heads = 3\n";
    EXPECT_EQ(run_cli("train --config " + cfg.string()), cli::exit_config);
    EXPECT_EQ(run_cli("no-such-command"), cli::exit_usage);
}

TEST(Commands, TrainEvaluatePredictEndToEnd) {
    const fs::path data = write_sine_csv("sine.csv");
    const fs::path ck = tmp_dir() / "sine.ckpt";
    const RunConfig cfg = small_run(data, ck);
    std::ostringstream out;
    ASSERT_EQ(cli::cmd_train(cfg, out), cli::exit_ok) << out.str();
    EXPECT_TRUE(fs::exists(ck));
    EXPECT_TRUE(fs::exists(ck.string() + ".log"));
    EXPECT_NE(out.str().find("epoch=0 "), std::string::npos);

    std::ostringstream par, rec;
    ASSERT_EQ(cli::cmd_evaluate(ck.string(), "", ExecMode::parallel, "", par), cli::exit_ok);
    ASSERT_EQ(cli::cmd_evaluate(ck.string(), "", ExecMode::recurrent, "", rec), cli::exit_ok);
    double mse_p = 0, mse_r = 0;
    std::sscanf(par.str().c_str(), "mse=%lf", &mse_p);
    std::sscanf(rec.str().c_str(), "mse=%lf", &mse_r);
    EXPECT_GT(mse_p, 0.0);
    EXPECT_NEAR(mse_p, mse_r, 1e-8);

    const fs::path pred = tmp_dir() / "pred.csv";
    std::ostringstream po;
    ASSERT_EQ(cli::cmd_predict(ck.string(), data.string(), pred.string(), std::nullopt, po), cli::exit_ok);
    const TimeSeries forecast = load_csv(pred.string());
    EXPECT_EQ(forecast.length(), 12u);
    EXPECT_EQ(forecast.channels(), 2u);
    EXPECT_EQ(forecast.timestamps.front(), "+1");
}

TEST(Commands, ZeroHeadCheckpointEvaluatesAsWindowMeanPredictor) {
    const fs::path data = write_sine_csv("sine_mean.csv", 400);
    const fs::path ck = tmp_dir() / "zero.ckpt";
    const RunConfig cfg = small_run(data, ck);
    const cli::PreparedData prepared = cli::prepare_data(cfg);
    save_checkpoint(ck.string(), init_params<double>(cfg.model, 1), cfg, Precision::f64, prepared.scaler);

    const auto test = cli::split_windows<double>(prepared, cfg, Split::test).samples;
    ASSERT_FALSE(test.empty());
    double se = 0, ae = 0;
    std::size_t n = 0;
    for (const auto& s : test) {
        for (std::size_t c = 0; c < s.input.cols(); ++c) {
            double mean = 0;
            for (std::size_t i = 0; i < s.input.rows(); ++i) mean += s.input(i, c);
            mean /= static_cast<double>(s.input.rows());
            for (std::size_t t = 0; t < s.target.rows(); ++t) {
                se += (mean - s.target(t, c)) * (mean - s.target(t, c));
                ae += std::abs(mean - s.target(t, c));
                ++n;
            }
        }
    }
    std::ostringstream out;
    const fs::path record = tmp_dir() / "zero.metrics";
    ASSERT_EQ(cli::cmd_evaluate(ck.string(), "", std::nullopt, record.string(), out), cli::exit_ok);
    double mse = 0, mae = 0;
    ASSERT_EQ(std::sscanf(out.str().c_str(), "mse=%lf mae=%lf", &mse, &mae), 2);
    EXPECT_NEAR(mse, se / static_cast<double>(n), 1e-8);
    EXPECT_NEAR(mae, ae / static_cast<double>(n), 1e-8);
    EXPECT_TRUE(fs::exists(record));
}

TEST(Commands, EquivalenceAtZeroToleranceFails) {
    std::string text;
    EXPECT_EQ(run_cli("check-equivalence --trials 5 --tolerance 0", &text), cli::exit_check_failed);
    EXPECT_NE(text.find("FAIL"), std::string::npos);
    EXPECT_EQ(run_cli("check-equivalence --trials 5", &text), cli::exit_ok) << text;
}

TEST(Commands, CorruptedGradientNamesGroup) {
    std::string text;
    EXPECT_EQ(run_cli("check-gradients --corrupt-op add_row", &text), cli::exit_check_failed);
    EXPECT_NE(text.find("head.b"), std::string::npos);
    EXPECT_NE(text.find("<-- FAIL"), std::string::npos);
    EXPECT_EQ(run_cli("check-gradients --corrupt-op nonsense"), cli::exit_config);
}

TEST(Commands, BenchWritesJson) {
    const fs::path json = tmp_dir() / "bench.json";
    std::string text;
    EXPECT_EQ(run_cli("bench --lengths 4 8 16 --repeats 5 --json " + json.string(), &text), cli::exit_ok) << text;
    EXPECT_NE(text.find("slope="), std::string::npos);
    std::ifstream f(json);
    const auto j = nlohmann::json::parse(f);
    EXPECT_EQ(j.at("latency").at("points").size(), 3u);
}
