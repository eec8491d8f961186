#pragma once

#include "gshdl/grid.hpp"
#include "gshdl/lbfgs.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace gshdl {

/// 4-connected pixel grid. Edges are numbered horizontally first
/// ((y, x)-(y, x+1) at y * (W - 1) + x), then vertically
/// ((y, x)-(y+1, x) at H * (W - 1) + y * W + x). Every edge runs from its
/// lower to its higher raster index.
struct GridGraph {
    std::size_t height = 0;
    std::size_t width = 0;

    [[nodiscard]] std::size_t num_nodes() const noexcept { return height * width; }
    [[nodiscard]] std::size_t num_edges() const noexcept { return 2 * height * width - height - width; }
    [[nodiscard]] std::size_t edge_source(std::size_t e) const noexcept;
    [[nodiscard]] std::size_t edge_target(std::size_t e) const noexcept;
    [[nodiscard]] std::size_t degree(std::size_t node) const noexcept;
    /// Uniform edge-appearance probability (HW - 1) / |E| of a spanning tree;
    /// 1 for a graph without edges.
    [[nodiscard]] double edge_appearance() const noexcept;
};

struct CrfWeights {
    std::size_t num_labels = 2;
    std::size_t num_features = 0;
    /// Row l: linear map on [features; 1] for label l (bias last).
    Eigen::MatrixXd unary;
    /// Symmetric, zero diagonal: penalty per disagreeing label pair.
    Eigen::MatrixXd pairwise;
    /// Contrast coefficient; unset means 1 / (2 * mean squared neighbour
    /// colour difference), calibrated per image.
    std::optional<double> fixed_beta;

    [[nodiscard]] static CrfWeights zeros(std::size_t num_labels, std::size_t num_features);
    [[nodiscard]] std::size_t parameter_count() const noexcept;
    /// Unary entries row-major, then the upper triangle of pairwise row-major.
    [[nodiscard]] std::vector<double> flatten() const;
    void assign(std::span<const double> flat);

    friend bool operator==(const CrfWeights&, const CrfWeights&) = default;
};

struct Potentials {
    GridGraph graph;
    std::size_t num_labels = 0;
    std::vector<double> unary;    ///< node * C + label, energies
    std::vector<double> pairwise; ///< (edge * C + label_source) * C + label_target
    std::vector<double> contrast; ///< per-edge exp(-beta * |dI|^2)
};

struct Beliefs {
    GridGraph graph;
    std::size_t num_labels = 0;
    std::vector<double> node; ///< node * C + label
    std::vector<double> edge; ///< (edge * C + label_source) * C + label_target
    std::size_t iterations_run = 0;
};

struct InferenceOptions {
    std::size_t max_iterations = 20;
    double damping = 0.5;
    /// Stop once no message moves by more than this (0 runs every iteration).
    double tolerance = 0.0;

    void validate() const;
};

/// Per-image contrast coefficient 1 / (2 * mean_e |I_s - I_t|^2); 0 for
/// images without any neighbour contrast.
[[nodiscard]] double calibrate_beta(const Grid2D& image);

/// theta_u(p, l) = -(unary_l . [f(p); 1]) and a contrast-sensitive Potts
/// pairwise term pairwise(l, l') * exp(-beta |I_p - I_q|^2) for l != l'.
[[nodiscard]] Potentials build_potentials(const Grid2D& features, const Grid2D& image, const CrfWeights& weights);

/// Tree-reweighted message passing with uniform edge appearance, log-domain
/// damped messages and a forward-raster / backward-raster schedule.
[[nodiscard]] Beliefs trw_infer(const Potentials& potentials, const InferenceOptions& opts);

struct CliqueLoss {
    double value = 0.0;
    std::size_t clamped = 0; ///< beliefs at the true labels that fell below 1e-12
};

/// -sum_edges log mu_pq(y_p, y_q) - sum_nodes (1 - rho deg(p)) log mu_p(y_p),
/// skipping cliques that touch void pixels.
[[nodiscard]] CliqueLoss clique_loss(const Beliefs& beliefs, const LabelGrid& labels);

struct CrfExample {
    Grid2D features;
    Grid2D image;
    LabelGrid labels;
};

struct LossOptions {
    InferenceOptions inference;
    /// Score only nodes on the even/even subgrid and the edges leaving them.
    bool stride2 = false;
};

struct LossGradient {
    double loss = 0.0;
    std::vector<double> gradient; ///< in CrfWeights::flatten() order
    std::size_t clamped = 0;
    std::size_t scored_nodes = 0;
};

/// Clique loss of the unrolled inference and its exact gradient by reverse
/// differentiation through every message update.
[[nodiscard]] LossGradient loss_and_gradient(const CrfWeights& weights, const CrfExample& example,
                                             const LossOptions& opts);

struct CrfTrainOptions {
    OptimizerOptions optimizer{.max_iterations = 40, .gradient_tolerance = 1e-5};
    LossOptions loss;
    double l2 = 1e-4;
    /// Learn the pairwise table; when false it stays at zero.
    bool pairwise = true;
    /// LBFGS iterations of a unary-only (no message passing) fit used as the
    /// starting point; 0 starts from zero weights.
    std::size_t warm_start_iterations = 60;
    /// Train on one fixed random crop of this side per image (0 = whole image).
    std::size_t crop_size = 0;
    std::uint64_t seed = 0;
    std::optional<double> fixed_beta;
};

struct CrfTrainResult {
    CrfWeights weights;
    std::vector<double> trace;
    std::vector<double> warm_start_trace;
};

/// Minimises (sum of clique losses) / (scored nodes) + l2 |w|^2 with LBFGS.
[[nodiscard]] CrfTrainResult train_crf(std::span<const CrfExample> dataset, std::size_t num_labels,
                                       const CrfTrainOptions& opts);

/// Per-node argmax of the TRW beliefs, ties to the smaller label.
[[nodiscard]] LabelGrid segment(const Potentials& potentials, const InferenceOptions& opts);

/// sum_p theta_u(p, y_p) + sum_e theta_e(y_s, y_t)
[[nodiscard]] double labeling_energy(const Potentials& potentials, const LabelGrid& labels);

} // namespace gshdl
