#pragma once

#include "gshdl/grid.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace gshdl {

struct ClassInfo {
    int code = 0; ///< value stored in mask files
    std::string name;
    std::array<std::uint8_t, 3> color{};

    friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

/// Label classes in training order; class i is predicted as label i. An
/// entry named "void" is kept apart and its pixels are ignored.
struct ClassMap {
    std::vector<ClassInfo> classes;
    std::optional<ClassInfo> void_class;

    [[nodiscard]] std::size_t size() const noexcept { return classes.size(); }
    /// Label index for a mask code, LabelGrid::kVoid for the void code, or
    /// nullopt for codes the map does not know.
    [[nodiscard]] std::optional<int> label_for_code(int code) const;

    /// `code<TAB>name<TAB>#RRGGBB` per line; blank lines and `#` comments skipped.
    [[nodiscard]] static ClassMap load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    /// Classes 0..n-1 with distinct colours and a void entry at code 255.
    [[nodiscard]] static ClassMap standard(std::size_t n);

    friend bool operator==(const ClassMap&, const ClassMap&) = default;
};

struct Sample {
    std::string name;
    Grid2D image; ///< RGB (or gray) in [0, 1]
    LabelGrid labels;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
    ClassMap class_map;
    std::vector<Sample> samples;

    [[nodiscard]] std::size_t size() const noexcept { return samples.size(); }
    [[nodiscard]] std::size_t num_classes() const noexcept { return class_map.size(); }
    [[nodiscard]] Dataset subset(const std::vector<std::size_t>& indices) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Manifest lines are `image_path<TAB>mask_path`, relative to the manifest's
/// directory unless absolute. The class map defaults to classes.tsv beside
/// the manifest.
[[nodiscard]] Dataset load_dataset(const std::filesystem::path& manifest,
                                   const std::filesystem::path& class_map = {});

/// Writes images/, masks/, manifest.tsv and classes.tsv under `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

struct SyntheticSpec {
    std::size_t num_images = 60;
    std::size_t size = 64;
    std::size_t num_classes = 4;
    std::uint64_t seed = 0;
    double noise = 0.05; ///< std-dev of the additive pixel noise

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Voronoi mosaics (3 to 6 regions) of class-specific oriented sinusoidal
/// textures with Gaussian noise (sigma 0.05), rendered as gray RGB.
[[nodiscard]] Dataset generate_synthetic(const SyntheticSpec& spec);

/// FNV-1a digest of all pixels and labels, for provenance records.
[[nodiscard]] std::uint64_t dataset_hash(const Dataset& dataset);

/// Most frequent non-void label of a grid (smallest label on ties, -1 if all void).
[[nodiscard]] int dominant_label(const LabelGrid& labels, std::size_t num_classes);

} // namespace gshdl
