#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "memwarp/data.hpp"
#include "memwarp/memory.hpp"
#include "memwarp/metrics.hpp"
#include "memwarp/network.hpp"
#include "memwarp/objective.hpp"

// Configuration, training, checkpoints and the inference commands behind the
// memwarp tool.
namespace memwarp::pipeline {

struct AblationFlags {
    bool pyramid = true;
    bool dice = true;
    bool memory = true;

    bool operator==(const AblationFlags&) const = default;
    /// Modes 1..6: none, pyramid, dice, pyramid+memory, dice+memory, all.
    static AblationFlags mode(int m);
    /// 1..6, or 0 for a combination outside the table.
    int mode_number() const;
    bool needs_masks() const { return dice || memory; }
};

struct TrainConfig {
    // optimisation
    double learning_rate = 4e-4;
    int batch_size = 4;
    int steps = 1500; // total optimiser steps; epochs > 0 overrides
    int epochs = 0;
    bool cosine_decay = true;
    double smoothness = 0.01;
    // network
    int levels = 3;
    std::vector<int64_t> channels{8, 16, 32};
    int memory_slots = 4;
    int integration_steps = 7;
    bool diffeomorphic = true;
    bool large_kernel = false;
    AblationFlags flags;
    // bookkeeping
    uint64_t seed = 42;
    std::string device = "cpu";
    int validate_every = 50;
    std::string data_root;
    std::string out_dir = "run";
    data::PhantomSpec grid; // grid and max displacement the model is built for

    void validate() const;
    network::NetworkConfig network() const;
    objective::LossWeights loss_weights() const;
    /// Optimiser steps implied by `steps` / `epochs` for a training set size.
    int total_steps(size_t train_pairs) const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    /// Desk (32x32x8, n = 3) and full-scale (128x128x16, n = 4) presets.
    static TrainConfig preset(const std::string& name);
};

/// Parses a JSON config file, applies `key.path=value` overrides (values are
/// read as JSON, falling back to a plain string) and MEMWARP_SEED.
nlohmann::json load_config_json(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides);
void apply_override(nlohmann::json& j, const std::string& assignment);
TrainConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

/// lr * (1 + cos(pi t / T)) / 2; constant lr when decay is off.
double learning_rate_at(const TrainConfig& config, int step, int total);

// --- checkpoints -------------------------------------------------------------

struct HistoryEntry {
    int step = 0;
    double val_dice = 0.0; // NaN when unsupervised
    double val_mse = 0.0;
};

struct Checkpoint {
    TrainConfig config;
    int step = 0;
    std::vector<HistoryEntry> history;
    network::LapWarp model{nullptr};
};

/// Archive: "MWCKPT01\n", u64 manifest length, JSON manifest, then the raw
/// little-endian float32 tensors at the offsets the manifest lists.
void save_checkpoint(const std::filesystem::path& path, const network::LapWarp& model, const TrainConfig& config,
                     int step, const std::vector<HistoryEntry>& history);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- training ----------------------------------------------------------------

struct TrainResult {
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
    std::vector<HistoryEntry> history;
    int best_step = 0;
    int steps = 0;
};

/// Logs go to <out_dir>/train_log.csv (step,sim,dsc,reg,rgn,total,lr) and
/// <out_dir>/val_log.csv. Throws NumericError on a non-finite loss after
/// dumping the loss breakdown to <out_dir>/nan_dump.json.
TrainResult train(const TrainConfig& config, std::function<void(const std::string&)> progress = {});

/// Batch [B,1,H,W,D] tensors (and one-hot masks when requested) for pair ids.
objective::PairBatch make_batch(const data::Dataset& dataset, const std::vector<std::string>& pair_ids,
                                bool with_masks);

// --- inference ---------------------------------------------------------------

/// phi_1 for one pair, no gradient.
DisplacementField predict_field(network::LapWarp& model, const ImageVolume& moving, const ImageVolume& fixed);

/// Conforming inputs are used as-is (renormalised only if outside [0, 1]);
/// anything else goes through data::preprocess onto the model grid.
ImageVolume conform(const ImageVolume& vol, const data::PhantomSpec& grid);

/// Loads a mask file; counts towards data::mask_reads().
LabelVolume load_mask(const std::filesystem::path& path, int num_classes);

struct RegisterOutputs {
    std::filesystem::path field, warped, warped_mask;
};
/// Writes field.nii.gz, warped.nii.gz and, with a moving mask, warped_mask.nii.gz.
RegisterOutputs register_pair(const std::filesystem::path& checkpoint, const std::filesystem::path& moving,
                              const std::filesystem::path& fixed, const std::filesystem::path& out_dir,
                              const std::optional<std::filesystem::path>& moving_mask = std::nullopt);

/// Per-pair reports for a split. A null model scores the unregistered pairs.
std::vector<metrics::EvaluationReport> evaluate_split(network::LapWarp* model, const data::Dataset& dataset,
                                                      const std::string& split);
/// Writes <out>.csv and <out>.json; returns the cohort mean.
metrics::EvaluationReport evaluate(const std::optional<std::filesystem::path>& checkpoint,
                                   const std::filesystem::path& data_root, const std::string& split,
                                   const std::filesystem::path& out_csv);

/// Address-map segmentation of a single image. Throws ConfigError for a
/// checkpoint trained without memory.
memory::Segmentation segment_image(network::LapWarp& model, const ImageVolume& fixed);
void segment(const std::filesystem::path& checkpoint, const std::filesystem::path& fixed,
             const std::filesystem::path& out_dir);

} // namespace memwarp::pipeline
