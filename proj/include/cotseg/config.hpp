#pragma once

// JSON run configuration. Every section is optional; unknown keys are
// rejected with ConfigError naming the dotted key path.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotseg/inference.hpp"
#include "cotseg/losses.hpp"
#include "cotseg/trainer.hpp"
#include "cotseg/unet.hpp"

namespace cotseg {

enum class Precision { Float32, Float64 };

struct DataConfig {
    std::string root;  // case directory tree; empty with synthetic > 0
    std::size_t synthetic = 0;  // generate this many cases instead
    Dims3 synthetic_extent{32, 32, 32};
    std::uint64_t synthetic_seed = 1;
    std::size_t folds = 3;
    std::vector<std::string> keep_modalities{"Flair", "T1", "T1c", "T2"};

    ModalitySet keep_set() const;
};

struct RunConfig {
    std::string tag = "run";
    Precision precision = Precision::Float32;
    UNetConfig model = UNetConfig::desk();
    TrainConfig train;  // train.loss is serialised as the "loss" section
    SlidingWindowConfig inference;
    DataConfig data;

    /// Throws ConfigError naming the offending key.
    void validate() const;
};

nlohmann::json to_json(const UNetConfig& c);
nlohmann::json to_json(const LossConfig& c);
nlohmann::json to_json(const TrainConfig& c);  // without "loss"
nlohmann::json to_json(const SlidingWindowConfig& c);
nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Overlay `j` onto `base`; `path` prefixes key names in errors.
UNetConfig unet_config_from_json(const nlohmann::json& j, UNetConfig base = {}, const std::string& path = "model");
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig base = {}, const std::string& path = "loss");
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}, const std::string& path = "train");
SlidingWindowConfig window_config_from_json(const nlohmann::json& j, SlidingWindowConfig base = {},
                                            const std::string& path = "inference");
DataConfig data_config_from_json(const nlohmann::json& j, DataConfig base = {}, const std::string& path = "data");
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});

/// Parses a file; throws ConfigError (key "file") if unreadable or not JSON.
RunConfig load_run_config(const std::filesystem::path& path);

std::string precision_name(Precision p);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& s);

}  // namespace cotseg
