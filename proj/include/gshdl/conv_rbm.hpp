#pragma once

#include "gshdl/grid.hpp"
#include "gshdl/pca_prior.hpp"
#include "gshdl/rng.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace gshdl {

enum class InitMode { prior, random };

struct LayerSpec {
    std::size_t num_filters = 1;
    std::size_t filter_size = 3;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Convolutional Gaussian-Bernoulli RBM with energy
///   E(v, h) = sum_p (v_p - c)^2 / (2 sigma^2) - sum_k h_k . ((W~_k * v) / sigma^2 + b_k)
/// where W~_k * v is the same-size correlation of v with filter k.
struct RbmLayer {
    std::size_t filter_size = 1;
    std::size_t in_channels = 1;
    /// One filter per row, laid out channel-major like a PatchMatrix column.
    Eigen::MatrixXd weights;
    Eigen::VectorXd hidden_bias;
    Eigen::VectorXd visible_bias; ///< one per input channel
    double sigma = 1.0;
    InitMode init_mode = InitMode::random;
    /// Prior direction that seeded each filter: index into the prior filters,
    /// then into the spares continuing the numbering; -1 for random filters.
    std::vector<int> filter_origin;

    [[nodiscard]] std::size_t num_filters() const noexcept { return static_cast<std::size_t>(weights.rows()); }
    void validate() const;

    friend bool operator==(const RbmLayer&, const RbmLayer&) = default;
};

struct TrainOptions {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double learning_rate = 0.01;
    std::size_t cd_steps = 1;
    double momentum = 0.5;
    std::uint64_t seed = 0;
    /// Side of the random square crop drawn from each image per visit; 0 trains
    /// on whole images.
    std::size_t crop_size = 0;

    void validate() const;
};

struct ConvergenceTrace {
    std::vector<double> reconstruction_error; ///< per-epoch mean
    std::vector<double> seconds;              ///< per-epoch wall clock, not persisted

    friend bool operator==(const ConvergenceTrace&, const ConvergenceTrace&) = default;
};

struct HiddenSample {
    Grid2D probabilities;
    Grid2D sample;
};

struct VisibleSample {
    Grid2D mean;
    Grid2D sample;
};

/// Velocity terms carried between successive CD updates.
struct MomentumState {
    Eigen::MatrixXd weights;
    Eigen::VectorXd hidden_bias;
    Eigen::VectorXd visible_bias;
};

struct TrainedRbm {
    RbmLayer layer;
    ConvergenceTrace trace;
};

/// Seeds filters with unflagged prior directions (then unflagged spares),
/// rescaled to an RMS of 0.01; any shortfall is drawn from N(0, 0.01^2).
[[nodiscard]] RbmLayer init_from_priors(const PriorFilterSet& priors, const LayerSpec& spec, std::uint64_t seed);
/// All filters drawn from N(0, 0.01^2).
[[nodiscard]] RbmLayer init_random(std::size_t in_channels, const LayerSpec& spec, std::uint64_t seed);

[[nodiscard]] HiddenSample hidden_given_visible(const RbmLayer& layer, const Grid2D& v, Rng& rng);
[[nodiscard]] VisibleSample visible_given_hidden(const RbmLayer& layer, const Grid2D& h, Rng& rng);

/// One contrastive-divergence step over a mini-batch, applied in place.
/// Returns the batch mean squared error between the data and the
/// reconstruction means after the first Gibbs half-step. A non-finite error
/// leaves the layer untouched and raises a numerical error.
double cd_k_update(RbmLayer& layer, std::span<const Grid2D> batch, const TrainOptions& opts, MomentumState& momentum,
                   Rng& rng);

/// Greedy training of one layer on standardised inputs. With `priors` the
/// layer starts from the prior directions, otherwise from random filters.
[[nodiscard]] TrainedRbm train_layer(std::span<const Grid2D> features, const LayerSpec& spec,
                                     const PriorFilterSet* priors, const TrainOptions& opts);

/// Deterministic hidden probabilities, one channel per filter.
[[nodiscard]] Grid2D feature_forward(const RbmLayer& layer, const Grid2D& v);

/// Copy of the layer keeping only the listed filters.
[[nodiscard]] RbmLayer select_filters(const RbmLayer& layer, std::span<const std::size_t> indices);

struct PruneOptions {
    double tolerance = 0.5; ///< PA points
    std::size_t subsets_per_size = 3;
    std::uint64_t seed = 0;
};

/// Cross-validated pixel accuracy (percent) of a segmenter built on the given
/// filter subset.
using SubsetEvaluator = std::function<double(std::span<const std::size_t>)>;

struct PruneResult {
    RbmLayer layer;
    std::vector<std::size_t> selected;
    double full_accuracy = 0.0;
    double selected_accuracy = 0.0;
    std::size_t evaluations = 0;
};

/// Smallest filter count whose best random subset keeps the cross-validated
/// accuracy within `tolerance` of the full set, found by bisection over
/// [1, K].
[[nodiscard]] PruneResult prune_filters(const RbmLayer& layer, const SubsetEvaluator& evaluate,
                                        const PruneOptions& opts);

} // namespace gshdl
