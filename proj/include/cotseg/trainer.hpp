#pragma once

// Optimisation: cosine schedule, adaptive-moment / SGD updates, the epoch
// loop with JSONL logging, checkpoints, and synthetic training data.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cotseg/losses.hpp"
#include "cotseg/params.hpp"
#include "cotseg/preprocess.hpp"
#include "cotseg/unet.hpp"

namespace cotseg {

enum class OptimizerKind { Adam, Sgd };
enum class DecayMode { Decoupled, CoupledL2 };

struct TrainConfig {
    double lr0 = 3e-4;
    double weight_decay = 1e-5;
    std::size_t epochs = 100;
    std::size_t batch_size = 1;
    LossConfig loss;
    std::uint64_t seed = 0;
    std::size_t fold = 0;
    std::size_t checkpoint_every = 0;  // epochs; 0 = only at the end
    OptimizerKind optimizer = OptimizerKind::Adam;
    DecayMode decay = DecayMode::Decoupled;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double momentum = 0.9;  // SGD only
    double grad_clip = 0.0;  // global L2 norm; 0 disables
    Dims3 patch{32, 32, 32};
    /// Random crops when a case exceeds the patch; centered otherwise.
    bool random_crop = true;
    /// wall_ms is written as 0 when false so logs compare byte for byte.
    bool record_wall_time = true;

    /// Throws ParameterError.
    void validate() const;
};

/// 0.5 * lr0 * (1 + cos(pi * step / total)). Throws ParameterError unless
/// 0 <= step <= total and total >= 1.
double cosine_lr(std::size_t step, std::size_t total, double lr0);

/// Moments and step count for a ParamStore, in registration order.
template <class T>
class Optimizer {
public:
    Optimizer() = default;
    Optimizer(const ParamStore<T>& params, const TrainConfig& cfg);

    /// One update with learning rate `lr` using the gradients held by the
    /// parameters. Throws NumericError naming the first parameter whose
    /// gradient is not finite; parameters are untouched in that case.
    void step(ParamStore<T>& params, double lr);

    std::size_t steps_taken() const { return t_; }
    /// Adam: first and second moments. SGD: velocity in `first`.
    std::vector<std::vector<T>>& first() { return m_; }
    std::vector<std::vector<T>>& second() { return v_; }
    const std::vector<std::vector<T>>& first() const { return m_; }
    const std::vector<std::vector<T>>& second() const { return v_; }
    void set_steps_taken(std::size_t t) { t_ = t; }

private:
    TrainConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

/// Global L2 norm of all parameter gradients.
template <class T>
double grad_norm(const ParamStore<T>& params);

struct StepRecord {
    std::size_t step = 0;  // 1-based
    std::size_t epoch = 0;  // 0-based
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;

    std::string to_json_line() const;
    static StepRecord from_json_line(const std::string& line);
};

template <class T>
struct TrainState {
    UNetConfig net;
    TrainConfig train;
    ParamStore<T> params;
    Optimizer<T> optimizer;
    std::size_t step = 0;  // completed updates

    static TrainState fresh(const UNetConfig& net, const TrainConfig& train);
};

struct TrainOutputs {
    std::optional<std::filesystem::path> checkpoint;  // final and periodic saves
    std::optional<std::filesystem::path> last_good;  // written on a numeric abort
    std::optional<std::filesystem::path> log;  // JSONL, appended
};

/// Runs the remaining steps of epochs * data.size(). Case order is a seeded
/// shuffle per epoch and crops are seeded per step, so a state restored
/// from a checkpoint continues exactly as the uninterrupted run would.
/// A non-finite loss or gradient throws NumericError after saving the
/// pre-step state to `last_good`. `stop_at` ends the run early once
/// state.step reaches it, keeping the full-length schedule.
template <class T>
std::vector<StepRecord> train(TrainState<T>& state, const std::vector<Case>& data, const TrainOutputs& out = {},
                              const std::function<void(const StepRecord&)>& on_step = {},
                              std::size_t stop_at = static_cast<std::size_t>(-1));

/// Loss of one prepared case without updating anything.
template <class T>
double evaluate_loss(const ParamStore<T>& params, const UNetConfig& net, const Case& c, const LossConfig& loss);

/// Binary container: "COTSEGCK", format version, step, JSON config with its
/// FNV-1a digest, then named little-endian buffers (params, optimizer state)
/// each with dtype and shape.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const TrainState<T>& state);
/// Converts buffers to T. Throws CheckpointError on malformed input or a
/// parameter layout that does not match the embedded config.
template <class T>
TrainState<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

template <class T>
void save_checkpoint(const TrainState<T>& state, const std::filesystem::path& path);
template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path);

/// Ellipsoidal brain with a nested tumour: ET inside TC inside WT, so labels
/// 1, 2 and 4 are always present. Intensities depend on region and
/// modality. Raw (not z-scored). Throws ParameterError if an extent < 8.
Case generate_synthetic_case(std::uint64_t seed, const Dims3& extents, const std::string& case_id = "");

/// Z-scores the image and crops/pads it (centered) to `extents` if given.
Case prepare_case(const Case& c, const std::optional<Dims3>& extents = std::nullopt);

}  // namespace cotseg
