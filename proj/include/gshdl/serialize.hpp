#pragma once

#include "gshdl/container.hpp"
#include "gshdl/conv_rbm.hpp"
#include "gshdl/crf.hpp"
#include "gshdl/grid.hpp"
#include "gshdl/pca_prior.hpp"
#include "gshdl/scatternet.hpp"

#include <string>
#include <vector>

namespace gshdl {

/// One image's exported scattering features ("FEAT" chunk). Planes are
/// stored as 32-bit floats.
struct FeatureRecord {
    std::string name;
    Grid2D values;
    std::vector<ScatterPath> paths;
};

[[nodiscard]] Chunk encode_features(const std::string& name, const FeatureStack& stack);
[[nodiscard]] FeatureRecord decode_features(const Chunk& chunk);

[[nodiscard]] Chunk encode_priors(const PriorFilterSet& priors);
[[nodiscard]] PriorFilterSet decode_priors(const Chunk& chunk);

struct RbmRecord {
    RbmLayer layer;
    ConvergenceTrace trace;
    /// Indices (into the unpruned layer) of the filters kept by pruning.
    std::vector<std::size_t> selected;

    friend bool operator==(const RbmRecord&, const RbmRecord&) = default;
};

[[nodiscard]] Chunk encode_rbm(const RbmRecord& record);
[[nodiscard]] RbmRecord decode_rbm(const Chunk& chunk);

[[nodiscard]] Chunk encode_stats(const ChannelStats& stats);
[[nodiscard]] ChannelStats decode_stats(const Chunk& chunk);

struct CrfRecord {
    CrfWeights weights;
    InferenceOptions inference;
};

[[nodiscard]] Chunk encode_crf(const CrfRecord& record);
[[nodiscard]] CrfRecord decode_crf(const Chunk& chunk);

/// Throws a format error unless the chunk carries the expected tag.
void expect_tag(const Chunk& chunk, std::string_view tag);

} // namespace gshdl
