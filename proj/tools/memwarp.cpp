// memwarp: synth | train | register | evaluate | segment
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "memwarp/data.hpp"
#include "memwarp/pipeline.hpp"

namespace fs = std::filesystem;
using namespace memwarp;

namespace {

int run_synth(const std::optional<fs::path>& spec_file, const std::vector<std::string>& overrides,
              const fs::path& out, int subjects) {
    auto j = pipeline::load_config_json(spec_file, overrides);
    subjects = j.value("subjects", subjects);
    auto ratios = j.value("ratios", std::array<double, 3>{0.6, 0.2, 0.2});
    j.erase("subjects");
    j.erase("ratios");
    const auto spec = data::PhantomSpec::from_json(j);
    const auto manifest = data::write_phantom_dataset(spec, subjects, out, ratios);
    std::cout << "wrote " << manifest.subjects.size() << " subjects ("
              << manifest.subjects_in("train").size() << " train, " << manifest.subjects_in("val").size()
              << " val, " << manifest.subjects_in("test").size() << " test) to " << out << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MemWarp deformable registration"};
    app.require_subcommand(1);

    std::optional<fs::path> config_file;
    std::vector<std::string> overrides;

    auto* synth = app.add_subcommand("synth", "Generate a phantom dataset");
    fs::path synth_out;
    int synth_subjects = 50;
    synth->add_option("--spec", config_file, "Phantom spec (JSON)");
    synth->add_option("--out", synth_out, "Dataset root")->required();
    synth->add_option("--subjects", synth_subjects, "Number of subjects")->capture_default_str();
    synth->add_option("--set", overrides, "key.path=value override");

    auto* train = app.add_subcommand("train", "Train a model");
    std::optional<std::string> train_data, train_out;
    std::optional<int> train_mode;
    train->add_option("--config", config_file, "Training config (JSON)");
    train->add_option("--set", overrides, "key.path=value override");
    train->add_option("--data", train_data, "Dataset root (data.root)");
    train->add_option("--out", train_out, "Output directory (out_dir)");
    train->add_option("--mode", train_mode, "Ablation mode 1..6");

    auto* reg = app.add_subcommand("register", "Register a moving image to a fixed image");
    fs::path ckpt, moving, fixed, out_dir;
    std::optional<fs::path> moving_mask;
    reg->add_option("--checkpoint", ckpt)->required();
    reg->add_option("--moving", moving)->required();
    reg->add_option("--fixed", fixed)->required();
    reg->add_option("--out", out_dir)->required();
    reg->add_option("--moving-mask", moving_mask, "Optional mask to carry along");

    auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a dataset split");
    std::optional<fs::path> eval_ckpt;
    fs::path eval_data, eval_out;
    std::string split = "test";
    bool identity = false;
    eval->add_option("--checkpoint", eval_ckpt);
    eval->add_flag("--identity", identity, "Score the unregistered pairs");
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--split", split)->capture_default_str();
    eval->add_option("--out", eval_out, "Report CSV; a JSON twin is written alongside")->required();

    auto* seg = app.add_subcommand("segment", "Segment a fixed image from the memory address maps");
    seg->add_option("--checkpoint", ckpt)->required();
    seg->add_option("--fixed", fixed)->required();
    seg->add_option("--out", out_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) {
            return run_synth(config_file, overrides, synth_out, synth_subjects);
        }
        if (train->parsed()) {
            if (train_data) {
                overrides.push_back("data.root=\"" + *train_data + "\"");
            }
            if (train_out) {
                overrides.push_back("out_dir=\"" + *train_out + "\"");
            }
            if (train_mode) {
                overrides.push_back("mode=" + std::to_string(*train_mode));
            }
            const auto config = pipeline::load_config(config_file, overrides);
            const auto result =
                pipeline::train(config, [](const std::string& line) { std::cout << line << std::endl; });
            std::cout << "best checkpoint (step " << result.best_step << "): " << result.best_checkpoint << '\n';
            return 0;
        }
        if (reg->parsed()) {
            const auto out = pipeline::register_pair(ckpt, moving, fixed, out_dir, moving_mask);
            std::cout << "field: " << out.field << "\nwarped: " << out.warped << '\n';
            if (!out.warped_mask.empty()) {
                std::cout << "warped mask: " << out.warped_mask << '\n';
            }
            return 0;
        }
        if (eval->parsed()) {
            if (identity == eval_ckpt.has_value()) {
                throw ConfigError("evaluate needs exactly one of --checkpoint or --identity");
            }
            const auto mean = pipeline::evaluate(eval_ckpt, eval_data, split, eval_out);
            std::cout << "dice_avg " << mean.dice_avg << " hd95_mm " << mean.hd95_mm << " sdlogj " << mean.sdlogj
                      << " nonpos_jac_frac " << mean.nonpos_jac_frac << '\n';
            return 0;
        }
        if (seg->parsed()) {
            pipeline::segment(ckpt, fixed, out_dir);
            std::cout << "segmentation written to " << out_dir << '\n';
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 4;
    }
    return 0;
}
