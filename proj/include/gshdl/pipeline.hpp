#pragma once

#include "gshdl/conv_rbm.hpp"
#include "gshdl/crf.hpp"
#include "gshdl/dataset.hpp"
#include "gshdl/image_io.hpp"
#include "gshdl/metrics.hpp"
#include "gshdl/pca_prior.hpp"
#include "gshdl/scatternet.hpp"
#include "gshdl/serialize.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gshdl {

/// Every tunable of a run. Feature stages are numbered 0 for the scattering
/// (handcrafted) features and l for the output of RBM layer l.
struct PipelineConfig {
    std::string profile = "desk";
    std::uint64_t seed = 0;

    SyntheticSpec synthetic; ///< used when no manifest is given; its seed follows `seed`
    SplitFractions split;
    std::size_t folds = 1;

    ScatterConfig scatter;
    std::vector<LayerSpec> layers;
    std::size_t prior_patches = 4000;
    TrainOptions rbm;

    bool prune = false;
    PruneOptions pruning;
    std::size_t prune_folds = 5;
    /// LBFGS budget of the unary-only CRF fitted inside pruning's cross-validation.
    std::size_t prune_crf_iterations = 40;

    CrfTrainOptions crf;
    InferenceOptions inference;
    /// Stage feeding the deployed CRF; defaults to the last RBM layer.
    std::optional<std::size_t> crf_stage;
    /// Further stages that each get their own CRF for the report's ablation.
    std::vector<std::size_t> report_stages;
    /// Also report a pairwise-free CRF and a majority-class predictor.
    bool baselines = true;

    [[nodiscard]] static PipelineConfig desk();
    [[nodiscard]] static PipelineConfig paper();
    [[nodiscard]] static PipelineConfig for_profile(const std::string& name);

    [[nodiscard]] std::size_t deployed_stage() const noexcept { return crf_stage.value_or(layers.size()); }
    void validate() const;
};

[[nodiscard]] nlohmann::json config_to_json(const PipelineConfig& config);
/// Keys missing from `j` keep their values from `base`; unknown keys are
/// rejected so typos surface as config errors.
[[nodiscard]] PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base);

struct LayerModel {
    PriorFilterSet priors;
    RbmRecord rbm;
    /// Standardisation of this layer's output, fitted on the training images.
    ChannelStats output_stats;
};

struct ModelBundle {
    PipelineConfig config;
    ClassMap class_map;
    std::uint64_t bank_fingerprint = 0;
    std::uint64_t dataset_hash = 0;
    ChannelStats input_stats;
    std::vector<LayerModel> layers;
    std::size_t crf_stage = 0;
    std::optional<CrfRecord> crf;
};

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
[[nodiscard]] ModelBundle load_bundle(const std::filesystem::path& path);
[[nodiscard]] std::vector<std::uint8_t> encode_bundle(const ModelBundle& bundle);
[[nodiscard]] ModelBundle decode_bundle(std::span<const std::uint8_t> bytes);

/// Standardised scattering features (stage 0) followed by one entry per
/// RBM layer, up to and including `stage`.
[[nodiscard]] std::vector<Grid2D> extract_stages(const ModelBundle& bundle, const FilterBank& bank,
                                                 const Grid2D& image, std::size_t stage);
/// Label map predicted by the bundle's CRF.
[[nodiscard]] LabelGrid segment_image(const ModelBundle& bundle, const FilterBank& bank, const Grid2D& image);

struct StageScore {
    std::size_t stage = 0;
    double pa = 0.0;
};

struct FoldReport {
    std::size_t fold = 0;
    std::size_t train_images = 0;
    std::size_t test_images = 0;
    ClassAccuracy accuracy; ///< deployed model on the test images
    std::vector<StageScore> stages;
    std::optional<double> unary_only_pa;
    std::optional<double> majority_pa;
    std::vector<std::size_t> layer_filters; ///< filters per layer after pruning
};

struct ExperimentReport {
    std::vector<std::string> class_names;
    ClassAccuracy accuracy; ///< pooled over every fold's test images
    std::vector<FoldReport> folds;
    nlohmann::json config;
    /// Kept out of report_to_json so reports of identical runs compare equal.
    double wall_clock_seconds = 0.0;
};

[[nodiscard]] nlohmann::json report_to_json(const ExperimentReport& report);

struct FoldOutcome {
    ModelBundle bundle;
    FoldReport report;
    ConfusionMatrix confusion;
};

/// Trains every stage on `train` and scores on `test` (indices into dataset).
[[nodiscard]] FoldOutcome run_fold(const Dataset& dataset, const std::vector<std::size_t>& train,
                                   const std::vector<std::size_t>& test, const PipelineConfig& config,
                                   std::size_t fold_index = 0);

struct ExperimentResult {
    ExperimentReport report;
    ModelBundle bundle; ///< model of the first fold
};

/// make_folds over the dataset, run_fold on each, pooled report.
[[nodiscard]] ExperimentResult run_experiment(const Dataset& dataset, const PipelineConfig& config);

/// Greedy training of every configured RBM layer (pruned when the config
/// asks for it) on the listed images; the result has no CRF yet.
[[nodiscard]] ModelBundle train_feature_stack(const Dataset& dataset, const std::vector<std::size_t>& train,
                                              const PipelineConfig& config);
/// Prunes the top RBM layer by cross-validation on `train`. Drops any CRF,
/// whose features no longer match. Returns the cross-validated accuracies
/// of the full and the kept filter sets.
PruneResult prune_last_layer(ModelBundle& bundle, const Dataset& dataset, const std::vector<std::size_t>& train);
/// Trains the bundle's CRF on its configured feature stage.
void fit_bundle_crf(ModelBundle& bundle, const Dataset& dataset, const std::vector<std::size_t>& train);
/// Pixel accuracy of the bundle on the listed images.
[[nodiscard]] ExperimentReport evaluate_bundle(const ModelBundle& bundle, const Dataset& dataset,
                                               const std::vector<std::size_t>& test);

/// Class-balanced subset of `pool` by dominant image label: per-class counts
/// differ by at most one whenever the pool allows it. Requesting the whole
/// pool returns it unchanged.
[[nodiscard]] std::vector<std::size_t> balanced_subset(const Dataset& dataset, const std::vector<std::size_t>& pool,
                                                       std::size_t size, std::uint64_t seed);

struct SweepPoint {
    std::size_t size = 0;
    std::vector<std::size_t> train;
    ExperimentReport report;
};

/// Trains on balanced subsets of fold 0's training images and scores each on
/// the whole test split.
[[nodiscard]] std::vector<SweepPoint> run_size_sweep(const Dataset& dataset, const std::vector<std::size_t>& sizes,
                                                     const PipelineConfig& config);

/// alpha * class colour + (1 - alpha) * image per pixel; void pixels keep
/// the image. Gray images are expanded to RGB.
[[nodiscard]] Image8 render_overlay(const Grid2D& image, const LabelGrid& labels, const ClassMap& class_map,
                                    double alpha);

/// Dataset from a manifest, or the configured synthetic set when `manifest` is empty.
[[nodiscard]] Dataset obtain_dataset(const PipelineConfig& config, const std::filesystem::path& manifest,
                                     const std::filesystem::path& class_map = {});

} // namespace gshdl
