#include "memwarp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "memwarp/fieldops.hpp"
#include "memwarp/volume_io.hpp"

namespace memwarp::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// --- ablation flags ------------------------------------------------------------

AblationFlags AblationFlags::mode(int m) {
    switch (m) {
    case 1: return {false, false, false};
    case 2: return {true, false, false};
    case 3: return {false, true, false};
    case 4: return {true, false, true};
    case 5: return {false, true, true};
    case 6: return {true, true, true};
    default: throw ConfigError("ablation mode must be 1..6, got " + std::to_string(m));
    }
}

int AblationFlags::mode_number() const {
    for (int m = 1; m <= 6; ++m) {
        if (mode(m) == *this) {
            return m;
        }
    }
    return 0;
}

// --- config --------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("optim.lr must be positive");
    }
    if (batch_size <= 0) {
        throw ConfigError("optim.batch_size must be positive");
    }
    if (steps <= 0 && epochs <= 0) {
        throw ConfigError("one of optim.steps / optim.epochs must be positive");
    }
    if (smoothness < 0.0) {
        throw ConfigError("loss.smoothness must be >= 0");
    }
    if (validate_every <= 0) {
        throw ConfigError("validation.every must be positive");
    }
    if (device != "cpu") {
        throw ConfigError("device '" + device + "' is not supported; this build runs on cpu");
    }
    grid.validate();
    network().validate();
    if (flags.memory && memory_slots != data::kPhantomClasses) {
        throw ConfigError("memory slots (" + std::to_string(memory_slots) + ") must equal the number of classes (" +
                          std::to_string(data::kPhantomClasses) + ") for the region loss");
    }
    const auto coarse = fieldops::level_dims(grid.shape.dims(), levels);
    for (auto d : coarse) {
        if (d < 2) {
            throw ConfigError("grid " + grid.shape.str() + " is too small for " + std::to_string(levels) + " levels");
        }
    }
}

network::NetworkConfig TrainConfig::network() const {
    network::NetworkConfig n;
    n.levels = levels;
    n.channels = channels;
    n.memory_slots = memory_slots;
    n.integration_steps = integration_steps;
    n.diffeomorphic = diffeomorphic;
    n.use_large_kernel = large_kernel;
    n.pyramid = flags.pyramid;
    n.memory = flags.memory;
    n.max_displacement = grid.max_displacement;
    return n;
}

objective::LossWeights TrainConfig::loss_weights() const {
    objective::LossWeights w;
    w.smoothness = smoothness;
    w.dice = flags.dice;
    w.region = flags.memory;
    return w;
}

int TrainConfig::total_steps(size_t train_pairs) const {
    if (epochs > 0) {
        const auto per_epoch = (train_pairs + static_cast<size_t>(batch_size) - 1) / static_cast<size_t>(batch_size);
        return static_cast<int>(per_epoch) * epochs;
    }
    return steps;
}

json TrainConfig::to_json() const {
    return {{"seed", seed},
            {"device", device},
            {"mode", flags.mode_number()},
            {"out_dir", out_dir},
            {"data", {{"root", data_root}, {"grid", grid.to_json()}}},
            {"optim",
             {{"lr", learning_rate},
              {"batch_size", batch_size},
              {"steps", steps},
              {"epochs", epochs},
              {"cosine_decay", cosine_decay}}},
            {"loss", {{"smoothness", smoothness}}},
            {"network",
             {{"levels", levels},
              {"channels", channels},
              {"memory_slots", memory_slots},
              {"integration_steps", integration_steps},
              {"diffeomorphic", diffeomorphic},
              {"large_kernel", large_kernel}}},
            {"ablation", {{"pyramid", flags.pyramid}, {"dice", flags.dice}, {"memory", flags.memory}}},
            {"validation", {{"every", validate_every}}}};
}

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) {
        throw ConfigError("config: '" + where + "' must be an object");
    }
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

} // namespace

TrainConfig TrainConfig::from_json(const json& j) {
    check_keys(j, "", {"preset", "seed", "device", "mode", "out_dir", "data", "optim", "loss", "network", "ablation",
                       "validation"});
    TrainConfig c = preset(j.value("preset", std::string("desk")));
    try {
        read(j, "seed", c.seed);
        read(j, "device", c.device);
        read(j, "out_dir", c.out_dir);
        if (j.contains("data")) {
            const auto& d = j.at("data");
            check_keys(d, "data", {"root", "grid"});
            read(d, "root", c.data_root);
            if (d.contains("grid")) {
                json merged = c.grid.to_json();
                merged.merge_patch(d.at("grid"));
                c.grid = data::PhantomSpec::from_json(merged);
            }
        }
        if (j.contains("optim")) {
            const auto& o = j.at("optim");
            check_keys(o, "optim", {"lr", "batch_size", "steps", "epochs", "cosine_decay"});
            read(o, "lr", c.learning_rate);
            read(o, "batch_size", c.batch_size);
            read(o, "steps", c.steps);
            read(o, "epochs", c.epochs);
            read(o, "cosine_decay", c.cosine_decay);
        }
        if (j.contains("loss")) {
            check_keys(j.at("loss"), "loss", {"smoothness"});
            read(j.at("loss"), "smoothness", c.smoothness);
        }
        if (j.contains("network")) {
            const auto& n = j.at("network");
            check_keys(n, "network",
                       {"levels", "channels", "memory_slots", "integration_steps", "diffeomorphic", "large_kernel"});
            read(n, "levels", c.levels);
            read(n, "channels", c.channels);
            read(n, "memory_slots", c.memory_slots);
            read(n, "integration_steps", c.integration_steps);
            read(n, "diffeomorphic", c.diffeomorphic);
            read(n, "large_kernel", c.large_kernel);
        }
        const int mode = j.value("mode", 0);
        if (mode != 0) {
            c.flags = AblationFlags::mode(mode);
        }
        if (j.contains("ablation")) {
            const auto& a = j.at("ablation");
            check_keys(a, "ablation", {"pyramid", "dice", "memory"});
            AblationFlags f = c.flags;
            read(a, "pyramid", f.pyramid);
            read(a, "dice", f.dice);
            read(a, "memory", f.memory);
            if (mode != 0 && !(f == c.flags)) {
                throw ConfigError("config: 'ablation' disagrees with mode " + std::to_string(mode));
            }
            c.flags = f;
        }
        if (j.contains("validation")) {
            check_keys(j.at("validation"), "validation", {"every"});
            read(j.at("validation"), "every", c.validate_every);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
    TrainConfig c;
    if (name == "desk") {
        return c;
    }
    if (name == "full") {
        c.levels = 4;
        c.channels = {16, 32, 64, 128};
        c.epochs = 400;
        c.grid.shape = {128, 128, 16, {1.8, 1.8, 10.0}};
        c.grid.lvbp_radius = 16.0;
        c.grid.lvm_thickness = 8.0;
        c.grid.rv_radius = 18.0;
        c.grid.edge_width = 2.4;
        c.grid.max_displacement = 3.9;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected desk or full)");
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not key.path=value");
    }
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &j;
    std::stringstream path(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(path, part, '.')) {
        if (part.empty()) {
            throw ConfigError("override '" + assignment + "' has an empty key segment");
        }
        parts.push_back(part);
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) {
            (*node)[parts[i]] = json::object();
        }
        node = &(*node)[parts[i]];
        if (!node->is_object()) {
            throw ConfigError("override '" + assignment + "': '" + parts[i] + "' is not a section");
        }
    }
    (*node)[parts.back()] = value;
}

json load_config_json(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (file) {
        std::ifstream in(*file);
        if (!in) {
            throw ConfigError("cannot open config " + file->string());
        }
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ConfigError("config " + file->string() + ": " + e.what());
        }
    }
    for (const auto& o : overrides) {
        apply_override(j, o);
    }
    if (const char* env = std::getenv("MEMWARP_SEED"); env && *env) {
        char* end = nullptr;
        const auto seed = std::strtoull(env, &end, 10);
        if (*end != '\0') {
            throw ConfigError(std::string("MEMWARP_SEED is not an integer: ") + env);
        }
        j["seed"] = seed;
    }
    return j;
}

TrainConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
    return TrainConfig::from_json(load_config_json(file, overrides));
}

double learning_rate_at(const TrainConfig& config, int step, int total) {
    if (!config.cosine_decay || total <= 0) {
        return config.learning_rate;
    }
    const double t = std::clamp(static_cast<double>(step) / total, 0.0, 1.0);
    return config.learning_rate * 0.5 * (1.0 + std::cos(M_PI * t));
}

// --- checkpoints -----------------------------------------------------------------

namespace {

constexpr char kMagic[] = "MWCKPT01\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;

std::vector<std::pair<std::string, torch::Tensor>> model_tensors(const network::LapWarp& model) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : model->named_parameters(true)) {
        out.emplace_back(p.key(), p.value());
    }
    for (const auto& b : model->named_buffers(true)) {
        out.emplace_back(b.key(), b.value());
    }
    return out;
}

json history_json(const std::vector<HistoryEntry>& history) {
    json h = json::array();
    for (const auto& e : history) {
        h.push_back({{"step", e.step},
                     {"val_dice", std::isnan(e.val_dice) ? json(nullptr) : json(e.val_dice)},
                     {"val_mse", e.val_mse}});
    }
    return h;
}

} // namespace

void save_checkpoint(const fs::path& path, const network::LapWarp& model, const TrainConfig& config, int step,
                     const std::vector<HistoryEntry>& history) {
    json manifest;
    manifest["format"] = "memwarp-checkpoint";
    manifest["config"] = config.to_json();
    manifest["step"] = step;
    manifest["history"] = history_json(history);
    manifest["tensors"] = json::array();
    std::vector<torch::Tensor> blobs;
    uint64_t offset = 0;
    for (const auto& [name, t] : model_tensors(model)) {
        auto data = t.detach().to(torch::kFloat32).contiguous();
        const uint64_t bytes = static_cast<uint64_t>(data.numel()) * sizeof(float);
        manifest["tensors"].push_back(
            {{"name", name}, {"shape", data.sizes().vec()}, {"dtype", "float32"}, {"offset", offset}, {"nbytes", bytes}});
        offset += bytes;
        blobs.push_back(data);
    }
    const auto text = manifest.dump();
    if (!path.parent_path().empty()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write checkpoint " + path.string());
    }
    const uint64_t len = text.size();
    out.write(kMagic, kMagicLen);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blobs) {
        out.write(reinterpret_cast<const char*>(b.data_ptr<float>()), static_cast<std::streamsize>(b.numel() * 4));
    }
    if (!out) {
        throw DataError("short write on checkpoint " + path.string());
    }
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    char magic[kMagicLen];
    uint64_t len = 0;
    in.read(magic, kMagicLen);
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0 || len > (1u << 30)) {
        throw DataError(path.string() + " is not a memwarp checkpoint");
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto base = in.tellg();
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError("checkpoint manifest: " + std::string(e.what()));
    }
    Checkpoint ck;
    ck.config = TrainConfig::from_json(manifest.at("config"));
    ck.step = manifest.value("step", 0);
    for (const auto& h : manifest.value("history", json::array())) {
        ck.history.push_back({h.at("step").get<int>(),
                              h.at("val_dice").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                         : h.at("val_dice").get<double>(),
                              h.at("val_mse").get<double>()});
    }
    ck.model = network::LapWarp(ck.config.network());
    std::map<std::string, json> entries;
    for (const auto& t : manifest.at("tensors")) {
        entries[t.at("name").get<std::string>()] = t;
    }
    torch::NoGradGuard no_grad;
    for (auto& [name, tensor] : model_tensors(ck.model)) {
        const auto it = entries.find(name);
        if (it == entries.end()) {
            throw DataError("checkpoint lacks tensor '" + name + "'");
        }
        const auto& e = it->second;
        if (e.at("dtype") != "float32" || e.at("shape").get<std::vector<int64_t>>() != tensor.sizes().vec()) {
            throw DataError("checkpoint tensor '" + name + "' does not match the model");
        }
        auto buf = torch::empty(tensor.sizes(), torch::kFloat32);
        in.seekg(base + static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
        in.read(reinterpret_cast<char*>(buf.data_ptr<float>()), static_cast<std::streamsize>(buf.numel() * 4));
        if (!in) {
            throw DataError("checkpoint " + path.string() + " is truncated");
        }
        tensor.copy_(buf);
        entries.erase(it);
    }
    if (!entries.empty()) {
        throw DataError("checkpoint has unexpected tensor '" + entries.begin()->first + "'");
    }
    ck.model->eval();
    return ck;
}

// --- training ----------------------------------------------------------------------

objective::PairBatch make_batch(const data::Dataset& dataset, const std::vector<std::string>& pair_ids,
                                bool with_masks) {
    std::vector<torch::Tensor> mov, fix, mmask, fmask;
    for (const auto& id : pair_ids) {
        mov.push_back(dataset.moving(id).data.unsqueeze(0));
        fix.push_back(dataset.fixed(id).data.unsqueeze(0));
        if (with_masks) {
            mmask.push_back(dataset.moving_mask(id).one_hot());
            fmask.push_back(dataset.fixed_mask(id).one_hot());
        }
    }
    objective::PairBatch b;
    b.moving = torch::stack(mov);
    b.fixed = torch::stack(fix);
    if (with_masks) {
        b.moving_onehot = torch::stack(mmask);
        b.fixed_onehot = torch::stack(fmask);
    }
    return b;
}

namespace {

struct ValidationScore {
    double dice = std::numeric_limits<double>::quiet_NaN();
    double mse = 0.0;
};

ValidationScore validate_model(network::LapWarp& model, const data::Dataset& dataset,
                               const std::vector<std::string>& pairs, bool supervised) {
    torch::NoGradGuard no_grad;
    model->eval();
    ValidationScore s;
    double dice_sum = 0.0;
    double mse_sum = 0.0;
    for (const auto& id : pairs) {
        const auto& mov = dataset.moving(id);
        const auto& fix = dataset.fixed(id);
        auto field = predict_field(model, mov, fix);
        auto warped = fieldops::warp(mov, field);
        mse_sum += (warped.data - fix.data).pow(2).mean().item<double>();
        if (supervised) {
            auto moved = fieldops::warp(dataset.moving_mask(id), field);
            const auto& target = dataset.fixed_mask(id);
            double d = 0.0;
            for (int k = 1; k < target.num_classes; ++k) {
                d += metrics::dice_score(moved, target, k);
            }
            dice_sum += d / (target.num_classes - 1);
        }
    }
    const double n = static_cast<double>(std::max<size_t>(pairs.size(), 1));
    s.mse = mse_sum / n;
    if (supervised) {
        s.dice = dice_sum / n;
    }
    model->train();
    return s;
}

std::string fmt(double v) {
    std::ostringstream o;
    o << std::setprecision(9) << v;
    return o.str();
}

} // namespace

TrainResult train(const TrainConfig& config, std::function<void(const std::string&)> progress) {
    config.validate();
    if (config.data_root.empty()) {
        throw ConfigError("data.root is not set");
    }
    const bool supervised = config.flags.needs_masks();
    const data::Dataset dataset(config.data_root, supervised);
    if (!dataset.shape().same_dims(config.grid.shape)) {
        throw DataError("dataset grid " + dataset.shape().str() + " does not match the configured grid " +
                        config.grid.shape.str());
    }
    auto train_pairs = dataset.pairs("train");
    const auto val_pairs = dataset.pairs("val");
    if (train_pairs.empty() || val_pairs.empty()) {
        throw DataError("dataset needs non-empty train and val splits");
    }
    // The model is built for the configured grid but must also cover the
    // displacement range the data was generated with.
    TrainConfig effective = config;
    effective.grid.max_displacement = std::max(config.grid.max_displacement, dataset.manifest().spec.max_displacement);
    effective.validate();

    torch::set_num_threads(1);
    torch::manual_seed(config.seed);
    std::mt19937_64 rng(config.seed);
    network::LapWarp model(effective.network());
    model->train();
    torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(config.learning_rate));
    const auto weights = effective.loss_weights();
    const int total = effective.total_steps(train_pairs.size());

    const fs::path out_dir = config.out_dir;
    fs::create_directories(out_dir);
    {
        std::ofstream cfg(out_dir / "config.json");
        cfg << effective.to_json().dump(2) << '\n';
    }
    std::ofstream log(out_dir / "train_log.csv");
    std::ofstream val_log(out_dir / "val_log.csv");
    log << "step,sim,dsc,reg,rgn,total,lr\n";
    val_log << "step,val_dice,val_mse\n";

    TrainResult result;
    result.best_checkpoint = out_dir / "best.ckpt";
    result.last_checkpoint = out_dir / "last.ckpt";
    double best = std::numeric_limits<double>::infinity(); // lower is better
    auto record_validation = [&](int step) {
        const auto s = validate_model(model, dataset, val_pairs, supervised);
        result.history.push_back({step, s.dice, s.mse});
        val_log << step << ',' << (supervised ? fmt(s.dice) : std::string("nan")) << ',' << fmt(s.mse) << '\n';
        const double score = supervised ? -s.dice : s.mse;
        if (score < best) {
            best = score;
            result.best_step = step;
            save_checkpoint(result.best_checkpoint, model, effective, step, result.history);
        }
        if (progress) {
            progress("step " + std::to_string(step) + "/" + std::to_string(total) +
                     (supervised ? " val_dice " + fmt(s.dice) : std::string()) + " val_mse " + fmt(s.mse));
        }
    };

    record_validation(0);
    size_t cursor = train_pairs.size();
    for (int step = 0; step < total; ++step) {
        std::vector<std::string> ids;
        while (static_cast<int>(ids.size()) < config.batch_size) {
            if (cursor >= train_pairs.size()) {
                std::shuffle(train_pairs.begin(), train_pairs.end(), rng);
                cursor = 0;
            }
            ids.push_back(train_pairs[cursor++]);
        }
        const double lr = learning_rate_at(config, step, total);
        for (auto& group : optimizer.param_groups()) {
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
        }
        const auto batch = make_batch(dataset, ids, supervised);
        auto fwd = model->forward(batch.moving, batch.fixed);
        auto loss = objective::composite_loss(batch, fwd, weights);
        const auto v = loss.values();
        if (!std::isfinite(v.total)) {
            json dump = {{"step", step + 1}, {"sim", v.sim}, {"dsc", v.dsc}, {"reg", v.reg},
                         {"rgn", v.rgn},     {"total", v.total}, {"pairs", ids}};
            std::ofstream(out_dir / "nan_dump.json") << dump.dump(2) << '\n';
            throw NumericError("non-finite loss at step " + std::to_string(step + 1) + ": " + dump.dump());
        }
        optimizer.zero_grad();
        loss.total.backward();
        optimizer.step();
        log << step + 1 << ',' << fmt(v.sim) << ',' << fmt(v.dsc) << ',' << fmt(v.reg) << ',' << fmt(v.rgn) << ','
            << fmt(v.total) << ',' << fmt(lr) << '\n';
        if ((step + 1) % config.validate_every == 0 || step + 1 == total) {
            record_validation(step + 1);
        }
    }
    result.steps = total;
    save_checkpoint(result.last_checkpoint, model, effective, total, result.history);
    return result;
}

// --- inference ---------------------------------------------------------------------

DisplacementField predict_field(network::LapWarp& model, const ImageVolume& moving, const ImageVolume& fixed) {
    torch::NoGradGuard no_grad;
    auto m = moving.data.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    auto f = fixed.data.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    auto out = model->forward(m, f);
    return {out.field.squeeze(0).contiguous()};
}

ImageVolume conform(const ImageVolume& vol, const data::PhantomSpec& grid) {
    const auto& g = grid.shape;
    const bool same_grid = vol.shape().same_dims(g) && vol.spacing == g.spacing;
    if (!same_grid) {
        return data::preprocess(vol, g.spacing, g.dims());
    }
    const double lo = vol.data.min().item<double>();
    const double hi = vol.data.max().item<double>();
    if (lo < 0.0 || hi > 1.0) {
        return data::normalize(vol);
    }
    return {vol.data.to(torch::kFloat32), vol.spacing};
}

LabelVolume load_mask(const fs::path& path, int num_classes) {
    ++data::mask_reads();
    return io::read_labels(path, num_classes);
}

RegisterOutputs register_pair(const fs::path& checkpoint, const fs::path& moving, const fs::path& fixed,
                              const fs::path& out_dir, const std::optional<fs::path>& moving_mask) {
    auto ck = load_checkpoint(checkpoint);
    const auto mov = conform(io::read_image(moving), ck.config.grid);
    const auto fix = conform(io::read_image(fixed), ck.config.grid);
    auto field = predict_field(ck.model, mov, fix);
    fs::create_directories(out_dir);
    RegisterOutputs out;
    out.field = out_dir / "field.nii.gz";
    out.warped = out_dir / "warped.nii.gz";
    io::write_field(field, out.field, mov.spacing);
    io::write_volume(fieldops::warp(mov, field), out.warped);
    if (moving_mask) {
        auto mask = load_mask(*moving_mask, data::kPhantomClasses);
        if (!mask.shape().same_dims(mov.shape())) {
            mask = data::preprocess_labels(mask, ck.config.grid.shape.spacing, ck.config.grid.shape.dims());
        }
        out.warped_mask = out_dir / "warped_mask.nii.gz";
        io::write_volume(fieldops::warp(mask, field), out.warped_mask);
    }
    return out;
}

std::vector<metrics::EvaluationReport> evaluate_split(network::LapWarp* model, const data::Dataset& dataset,
                                                      const std::string& split) {
    const auto pairs = dataset.pairs(split);
    if (pairs.empty()) {
        throw DataError("split '" + split + "' is empty");
    }
    std::vector<metrics::EvaluationReport> reports;
    for (const auto& id : pairs) {
        const auto& mov = dataset.moving(id);
        DisplacementField field =
            model ? predict_field(*model, mov, dataset.fixed(id)) : fieldops::identity_displacement(mov.shape());
        reports.push_back(
            metrics::evaluate_pair(dataset.fixed_mask(id), dataset.moving_mask(id), field, mov.spacing, id));
    }
    return reports;
}

metrics::EvaluationReport evaluate(const std::optional<fs::path>& checkpoint, const fs::path& data_root,
                                   const std::string& split, const fs::path& out_csv) {
    const data::Dataset dataset(data_root, true);
    std::optional<Checkpoint> ck;
    if (checkpoint) {
        ck = load_checkpoint(*checkpoint);
        if (!dataset.shape().same_dims(ck->config.grid.shape)) {
            throw DataError("dataset grid " + dataset.shape().str() + " does not match the checkpoint grid " +
                            ck->config.grid.shape.str());
        }
    }
    const auto reports = evaluate_split(ck ? &ck->model : nullptr, dataset, split);
    if (!out_csv.parent_path().empty()) {
        fs::create_directories(out_csv.parent_path());
    }
    metrics::write_csv(out_csv, reports);
    auto json_path = out_csv;
    json_path.replace_extension(".json");
    std::ofstream(json_path) << metrics::to_json(reports).dump(2) << '\n';
    return metrics::cohort_mean(reports);
}

memory::Segmentation segment_image(network::LapWarp& model, const ImageVolume& fixed) {
    if (!model->config().memory) {
        throw ConfigError("segment needs a checkpoint trained with memory enabled");
    }
    torch::NoGradGuard no_grad;
    // The fixed stream and its address maps do not depend on the moving image.
    auto f = fixed.data.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
    auto out = model->forward(f, f);
    std::vector<torch::Tensor> maps;
    for (const auto& m : out.address_maps) {
        maps.push_back(m.squeeze(0));
    }
    return memory::segmentation_from_address(maps, fixed.shape());
}

void segment(const fs::path& checkpoint, const fs::path& fixed, const fs::path& out_dir) {
    auto ck = load_checkpoint(checkpoint);
    if (!ck.config.flags.memory) {
        throw ConfigError("segment needs a checkpoint trained with memory enabled");
    }
    const auto img = conform(io::read_image(fixed), ck.config.grid);
    const auto seg = segment_image(ck.model, img);
    fs::create_directories(out_dir);
    io::write_volume(seg.labels, out_dir / "seg.nii.gz");
    io::write_probabilities(seg.probabilities, out_dir / "prob.nii.gz", img.spacing);
}

} // namespace memwarp::pipeline
