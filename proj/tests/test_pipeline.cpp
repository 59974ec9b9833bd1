#include "test_support.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "memwarp/data.hpp"
#include "memwarp/metrics.hpp"
#include "memwarp/pipeline.hpp"
#include "memwarp/volume_io.hpp"

using namespace memwarp;
namespace fs = std::filesystem;
namespace pl = memwarp::pipeline;

namespace {

fs::path root() {
    static const fs::path dir = [] {
        auto p = fs::temp_directory_path() / "memwarp_test_pipeline";
        fs::remove_all(p);
        fs::create_directories(p);
        data::PhantomSpec spec;
        spec.seed = 21;
        data::write_phantom_dataset(spec, 10, p / "data");
        return p;
    }();
    return dir;
}

pl::TrainConfig tiny(const std::string& out, int mode = 6) {
    auto c = pl::TrainConfig::preset("desk");
    c.channels = {4, 8, 8};
    c.steps = 3;
    c.batch_size = 2;
    c.validate_every = 2;
    c.flags = pl::AblationFlags::mode(mode);
    c.data_root = (root() / "data").string();
    c.out_dir = (root() / out).string();
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(MEMWARP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("ablation modes") {
    for (int m = 1; m <= 6; ++m) {
        CHECK(pl::AblationFlags::mode(m).mode_number() == m);
    }
    CHECK(pl::AblationFlags::mode(1) == pl::AblationFlags{false, false, false});
    CHECK(pl::AblationFlags::mode(4) == pl::AblationFlags{true, false, true});
    CHECK(pl::AblationFlags::mode(5) == pl::AblationFlags{false, true, true});
    CHECK_FALSE(pl::AblationFlags::mode(2).needs_masks());
    CHECK(pl::AblationFlags::mode(4).needs_masks());
    CHECK(pl::AblationFlags{false, false, true}.mode_number() == 0);
    CHECK_THROWS_AS(pl::AblationFlags::mode(7), ConfigError);
}

TEST_CASE("config loading, overrides and validation") {
    const auto dir = root() / "cfg";
    fs::create_directories(dir);
    std::ofstream(dir / "c.json") << R"({"mode": 4, "optim": {"lr": 0.001}, "network": {"channels": [4, 8, 16]}})";
    auto c = pl::load_config(dir / "c.json", {"optim.steps=20", "out_dir=somewhere", "loss.smoothness=0.5"});
    CHECK(c.learning_rate == 0.001);
    CHECK(c.steps == 20);
    CHECK(c.out_dir == "somewhere");
    CHECK(c.smoothness == 0.5);
    CHECK(c.channels == std::vector<int64_t>{4, 8, 16});
    CHECK(c.flags.mode_number() == 4);
    CHECK(pl::TrainConfig::from_json(c.to_json()).to_json() == c.to_json());

    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"optim.learning_rate=1"}), ConfigError);
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"bogus=1"}), ConfigError);
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"mode=2", "ablation.dice=true"}), ConfigError);
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"network.memory_slots=5"}), ConfigError);
    CHECK_NOTHROW(pl::load_config(std::nullopt, {"network.memory_slots=5", "mode=3"}));
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"device=cuda"}), ConfigError);
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"optim.lr=-1"}), ConfigError);
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {"noequals"}), ConfigError);
    CHECK_THROWS_AS(pl::load_config(dir / "missing.json", {}), ConfigError);
    std::ofstream(dir / "bad.json") << "{not json";
    CHECK_THROWS_AS(pl::load_config(dir / "bad.json", {}), ConfigError);

    ::setenv("MEMWARP_SEED", "1234", 1);
    CHECK(pl::load_config(std::nullopt, {"seed=5"}).seed == 1234);
    ::setenv("MEMWARP_SEED", "12x", 1);
    CHECK_THROWS_AS(pl::load_config(std::nullopt, {}), ConfigError);
    ::unsetenv("MEMWARP_SEED");
    CHECK(pl::load_config(std::nullopt, {"seed=5"}).seed == 5);

    auto full = pl::TrainConfig::preset("full");
    CHECK(full.levels == 4);
    CHECK(full.grid.shape.dims() == std::array<int64_t, 3>{128, 128, 16});
    CHECK(full.grid.shape.spacing == Spacing{1.8, 1.8, 10.0});
    CHECK(full.learning_rate == 4e-4);
    CHECK(full.smoothness == 0.01);
    CHECK(full.epochs == 400);
    CHECK(full.total_steps(170) == 400 * 43);
    CHECK_NOTHROW(full.validate());
    CHECK_THROWS_AS(pl::TrainConfig::preset("huge"), ConfigError);
}

TEST_CASE("cosine learning rate") {
    pl::TrainConfig c;
    CHECK(pl::learning_rate_at(c, 0, 100) == c.learning_rate);
    CHECK(pl::learning_rate_at(c, 50, 100) == doctest::Approx(c.learning_rate / 2));
    CHECK(pl::learning_rate_at(c, 100, 100) == doctest::Approx(0.0));
    c.cosine_decay = false;
    CHECK(pl::learning_rate_at(c, 70, 100) == c.learning_rate);
}

TEST_CASE("checkpoint round trip") {
    torch::manual_seed(60);
    auto c = tiny("ckpt");
    network::LapWarp model(c.network());
    const auto path = root() / "model.ckpt";
    pl::save_checkpoint(path, model, c, 17, {{0, 0.5, 0.01}, {17, 0.75, 0.005}});
    auto ck = pl::load_checkpoint(path);
    CHECK(ck.step == 17);
    REQUIRE(ck.history.size() == 2);
    CHECK(ck.history[1].val_dice == 0.75);
    CHECK(ck.config.to_json() == c.to_json());
    auto a = model->named_parameters();
    for (const auto& p : ck.model->named_parameters()) {
        CHECK_MESSAGE(torch::equal(p.value(), a[p.key()]), p.key());
    }
    model->eval();
    auto m = torch::rand({1, 1, 32, 32, 8}), f = torch::rand({1, 1, 32, 32, 8});
    torch::NoGradGuard no_grad;
    CHECK(torch::equal(model->forward(m, f).field, ck.model->forward(m, f).field));

    std::ofstream(root() / "junk.ckpt") << "nope";
    CHECK_THROWS_AS(pl::load_checkpoint(root() / "junk.ckpt"), DataError);
    auto bytes = slurp(path);
    std::ofstream(root() / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 100);
    CHECK_THROWS_AS(pl::load_checkpoint(root() / "short.ckpt"), DataError);
}

TEST_CASE("identity evaluation equals the unregistered metrics") {
    data::Dataset ds(root() / "data", true);
    auto reports = pl::evaluate_split(nullptr, ds, "test");
    REQUIRE(reports.size() == 4);
    for (const auto& r : reports) {
        const auto& fm = ds.fixed_mask(r.pair_id);
        const auto& mm = ds.moving_mask(r.pair_id);
        for (int k = 1; k < 4; ++k) {
            CHECK(r.dice[k - 1] == metrics::dice_score(mm, fm, k));
        }
        CHECK(r.sdlogj == 0.0);
        CHECK(r.nonpos_jac_frac == 0.0);
    }
    auto mean = pl::evaluate(std::nullopt, root() / "data", "test", root() / "eval" / "init.csv");
    CHECK(mean.dice_avg == doctest::Approx(metrics::cohort_mean(reports).dice_avg).epsilon(1e-12));
    CHECK(fs::exists(root() / "eval" / "init.json"));
    CHECK(mean.dice_avg < 0.8);
}

TEST_CASE("training run, logs, determinism and inference") {
    auto c = tiny("run_a");
    const auto result = pl::train(c);
    CHECK(result.steps == 3);
    REQUIRE(result.history.size() == 3); // steps 0, 2, 3
    CHECK(result.history[1].step == 2);
    CHECK(fs::exists(result.best_checkpoint));
    CHECK(fs::exists(result.last_checkpoint));
    const auto log = slurp(fs::path(c.out_dir) / "train_log.csv");
    CHECK(log.rfind("step,sim,dsc,reg,rgn,total,lr\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);

    auto again = tiny("run_b");
    pl::train(again);
    CHECK(log == slurp(fs::path(again.out_dir) / "train_log.csv"));
    CHECK(slurp(fs::path(c.out_dir) / "val_log.csv") == slurp(fs::path(again.out_dir) / "val_log.csv"));

    SUBCASE("register reads no masks unless asked") {
        const auto subj = root() / "data" / "subject_000";
        const auto before = data::mask_reads().load();
        auto out = pl::register_pair(result.last_checkpoint, subj / "ed_img.nii.gz", subj / "es_img.nii.gz",
                                     root() / "reg");
        CHECK(data::mask_reads().load() == before);
        CHECK(fs::exists(out.field));
        CHECK(fs::exists(out.warped));
        CHECK(out.warped_mask.empty());
        auto field = io::read_field(out.field);
        CHECK(field.vectors.sizes() == torch::IntArrayRef({3, 32, 32, 8}));

        auto with = pl::register_pair(result.last_checkpoint, subj / "ed_img.nii.gz", subj / "es_img.nii.gz",
                                      root() / "reg2", subj / "ed_seg.nii.gz");
        CHECK(data::mask_reads().load() == before + 1);
        CHECK(fs::exists(with.warped_mask));
        // Same field either way.
        CHECK(torch::equal(io::read_field(with.field).vectors, field.vectors));
    }
    SUBCASE("segment needs memory") {
        pl::segment(result.last_checkpoint, root() / "data" / "subject_001" / "es_img.nii.gz", root() / "seg");
        auto seg = io::read_labels(root() / "seg" / "seg.nii.gz");
        CHECK(seg.labels.sizes() == torch::IntArrayRef({32, 32, 8}));
        CHECK(seg.labels.max().item<int64_t>() <= 3);
        auto prob = io::read_probabilities(root() / "seg" / "prob.nii.gz");
        CHECK((prob.sum(0) - 1.0).abs().max().item<double>() < 1e-4);

        auto plain = tiny("run_plain", 2);
        plain.steps = 1;
        const auto r = pl::train(plain);
        CHECK_THROWS_AS(pl::segment(r.last_checkpoint, root() / "data" / "subject_001" / "es_img.nii.gz",
                                    root() / "seg_plain"),
                        ConfigError);
    }
}

TEST_CASE("unsupervised modes never load masks") {
    auto c = tiny("run_unsup", 2);
    c.steps = 2;
    const auto before = data::mask_reads().load();
    auto r = pl::train(c);
    CHECK(data::mask_reads().load() == before);
    CHECK(std::isnan(r.history.front().val_dice));
}

TEST_CASE("a diverging run stops with a numeric error and a dump") {
    auto c = tiny("run_nan");
    c.learning_rate = 1e30;
    c.cosine_decay = false;
    c.steps = 20;
    CHECK_THROWS_AS(pl::train(c), NumericError);
    CHECK(fs::exists(fs::path(c.out_dir) / "nan_dump.json"));
}

TEST_CASE("command-line exit codes") {
    const auto r = root().string();
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("synth --out " + r + "/cli_ds --subjects 5") == 0);
    CHECK(fs::exists(root() / "cli_ds" / "manifest.json"));
    CHECK(run_cli("synth --out " + r + "/cli_bad --set max_displacement=5") == 2);
    CHECK(run_cli("train --data " + r + "/data --set bogus.key=1") == 2);
    CHECK(run_cli("train --data " + r + "/nowhere --out " + r + "/cli_run --set optim.steps=1") == 3);
    CHECK(run_cli("evaluate --identity --data " + r + "/data --out " + r + "/cli_eval.csv") == 0);
    CHECK(run_cli("evaluate --data " + r + "/data --out " + r + "/cli_eval.csv") == 2);
    CHECK(run_cli("register --checkpoint " + r + "/junk.ckpt --moving a --fixed b --out " + r + "/x") == 3);
    CHECK(run_cli("train --data " + r + "/data --out " + r + "/cli_nan --set optim.lr=1e30 --set optim.steps=20 "
                  "--set optim.cosine_decay=false --set network.channels=[4,8,8]") == 4);
}
