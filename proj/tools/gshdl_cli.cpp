// Command-line front end. Every subcommand writes into --out and reports
// failures as "error[<category>]: message" on stderr with a nonzero exit.

#include "gshdl/error.hpp"
#include "gshdl/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gshdl;

namespace {

struct GlobalOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string profile = "desk";
    std::string out = "out";
    std::string manifest;
    std::string classes;
    bool use_all = false;
};

PipelineConfig resolve_config(const GlobalOptions& g)
{
    PipelineConfig config = PipelineConfig::for_profile(g.profile);
    if (!g.config_path.empty()) {
        std::ifstream in(g.config_path);
        if (!in) throw Error(ErrorKind::io, "cannot open config " + g.config_path);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw Error(ErrorKind::config, "config " + g.config_path + " is not valid JSON: " + e.what());
        }
        config = config_from_json(j, config);
    }
    if (g.seed) config.seed = *g.seed;
    config.validate();
    return config;
}

void write_json(const fs::path& path, const json& j)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::vector<std::size_t> all_indices(const Dataset& ds)
{
    std::vector<std::size_t> v(ds.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
}

// Fold 0 of the configured split, or every image with --all.
Fold working_split(const Dataset& ds, const PipelineConfig& config, bool use_all)
{
    if (use_all) return {all_indices(ds), {}, all_indices(ds)};
    return make_folds(ds.size(), 1, config.split, derive_seed(config.seed, 50)).front();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Scattering + convolutional RBM + CRF semantic segmentation"};
    app.require_subcommand(1);
    GlobalOptions g;
    app.add_option("--config", g.config_path, "JSON configuration overriding the profile")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Base random seed");
    app.add_option("--profile", g.profile, "Default settings: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--out", g.out, "Output directory");

    auto add_data = [&g](CLI::App* cmd) {
        cmd->add_option("--manifest", g.manifest, "Manifest (image<TAB>mask); synthetic data when omitted");
        cmd->add_option("--classes", g.classes, "Class map (default: classes.tsv next to the manifest)");
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic texture dataset");
    std::size_t num_images = 60, size = 64, num_classes = 4;
    synth->add_option("--num-images", num_images);
    synth->add_option("--size", size);
    synth->add_option("--num-classes", num_classes);

    auto* scatter_cmd = app.add_subcommand("scatter", "Export scattering features of every image");
    add_data(scatter_cmd);

    auto* priors_cmd = app.add_subcommand("train-priors", "Learn PCA priors for the first RBM layer");
    add_data(priors_cmd);
    priors_cmd->add_flag("--all", g.use_all, "Use every image instead of the training split");

    auto* rbm_cmd = app.add_subcommand("train-rbm", "Train the RBM stack (writes model.gshd without a CRF)");
    add_data(rbm_cmd);
    rbm_cmd->add_flag("--all", g.use_all, "Use every image instead of the training split");

    std::string model_path;
    auto* prune_cmd = app.add_subcommand("prune", "Prune the top RBM layer of a model by cross-validation");
    add_data(prune_cmd);
    prune_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    prune_cmd->add_flag("--all", g.use_all, "Use every image instead of the training split");

    auto* crf_cmd = app.add_subcommand("train-crf", "Train the CRF of a model");
    add_data(crf_cmd);
    crf_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    crf_cmd->add_flag("--all", g.use_all, "Use every image instead of the training split");

    std::vector<std::string> images;
    double alpha = 0.5;
    auto* seg_cmd = app.add_subcommand("segment", "Label images with a trained model");
    seg_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    seg_cmd->add_option("images", images, "Input images")->required()->check(CLI::ExistingFile);
    seg_cmd->add_option("--alpha", alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));

    auto* eval_cmd = app.add_subcommand("eval", "Per-class pixel accuracy of a model");
    add_data(eval_cmd);
    eval_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    eval_cmd->add_flag("--all", g.use_all, "Score every image instead of the test split");

    std::vector<std::size_t> sizes{8, 16, 32, 40};
    auto* sweep_cmd = app.add_subcommand("sweep", "Accuracy against training-set size");
    add_data(sweep_cmd);
    sweep_cmd->add_option("--sizes", sizes)->delimiter(',');

    auto* pipe_cmd = app.add_subcommand("pipeline", "Run every stage and write report, timing and model");
    add_data(pipe_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() != 0) std::cerr << "error[config]: ";
        return app.exit(e);
    }

    try {
        const fs::path out(g.out);
        const PipelineConfig config = resolve_config(g);

        if (synth->parsed()) {
            const Dataset ds = generate_synthetic({num_images, size, num_classes, config.seed});
            save_dataset(ds, out);
            std::cout << "wrote " << ds.size() << " images to " << out.string() << "\n";
        } else if (scatter_cmd->parsed()) {
            const Dataset ds = obtain_dataset(config, g.manifest, g.classes);
            const FilterBank bank = build_filter_bank(config.scatter);
            std::vector<Chunk> chunks;
            for (const Sample& s : ds.samples) chunks.push_back(encode_features(s.name, scatter(s.image, bank, config.scatter)));
            write_container(out / "features.gshd", chunks);
            std::cout << "wrote features of " << ds.size() << " images to " << (out / "features.gshd").string() << "\n";
        } else if (priors_cmd->parsed()) {
            if (config.layers.empty()) throw Error(ErrorKind::config, "the configuration has no RBM layers");
            const Dataset ds = obtain_dataset(config, g.manifest, g.classes);
            const Fold split = working_split(ds, config, g.use_all);
            const FilterBank bank = build_filter_bank(config.scatter);
            std::vector<Grid2D> feats;
            for (std::size_t i : split.train) feats.push_back(scatter(ds.samples[i].image, bank, config.scatter).concatenated());
            const ChannelStats stats = ChannelStats::fit(feats);
            for (Grid2D& f : feats) f = stats.apply(f);
            const LayerSpec& spec = config.layers.front();
            const PatchMatrix x = sample_patches(feats, spec.filter_size, config.prior_patches, config.seed);
            const std::size_t k = std::min(spec.num_filters, x.dimension());
            const PriorFilterSet priors = learn_pca_filters(x, k, std::min(k, x.dimension() - k));
            const std::vector<Chunk> chunks{encode_stats(stats), encode_priors(priors)};
            write_container(out / "priors.gshd", chunks);
            std::cout << "learned " << priors.size() << " filters (" << priors.flagged_count()
                      << " checkerboard) into " << (out / "priors.gshd").string() << "\n";
        } else if (rbm_cmd->parsed()) {
            const Dataset ds = obtain_dataset(config, g.manifest, g.classes);
            const Fold split = working_split(ds, config, g.use_all);
            const ModelBundle bundle = train_feature_stack(ds, split.train, config);
            save_bundle(bundle, out / "model.gshd");
            for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
                const auto& trace = bundle.layers[l].rbm.trace.reconstruction_error;
                std::cout << "layer " << l + 1 << ": " << bundle.layers[l].rbm.layer.num_filters()
                          << " filters, final reconstruction error " << (trace.empty() ? 0.0 : trace.back()) << "\n";
            }
        } else if (prune_cmd->parsed()) {
            ModelBundle bundle = load_bundle(model_path);
            const Dataset ds = obtain_dataset(bundle.config, g.manifest, g.classes);
            const PruneResult pruned = prune_last_layer(bundle, ds, working_split(ds, bundle.config, g.use_all).train);
            save_bundle(bundle, out / "model.gshd");
            std::cout << "top layer keeps " << pruned.selected.size() << " filters (cross-validated PA "
                      << pruned.selected_accuracy << " vs " << pruned.full_accuracy << " with all)\n";
        } else if (crf_cmd->parsed()) {
            ModelBundle bundle = load_bundle(model_path);
            const Dataset ds = obtain_dataset(bundle.config, g.manifest, g.classes);
            fit_bundle_crf(bundle, ds, working_split(ds, bundle.config, g.use_all).train);
            save_bundle(bundle, out / "model.gshd");
            std::cout << "trained CRF written to " << (out / "model.gshd").string() << "\n";
        } else if (seg_cmd->parsed()) {
            const ModelBundle bundle = load_bundle(model_path);
            const FilterBank bank = build_filter_bank(bundle.config.scatter);
            for (const std::string& path : images) {
                const Grid2D image = to_grid(read_image8(path));
                const LabelGrid labels = segment_image(bundle, bank, image);
                const std::string stem = fs::path(path).stem().string();
                LabelGrid codes = labels;
                for (int& l : codes.labels) l = bundle.class_map.classes.at(static_cast<std::size_t>(l)).code;
                write_mask(out / (stem + "_labels.png"), codes);
                write_image8(out / (stem + "_overlay.png"), render_overlay(image, labels, bundle.class_map, alpha));
                std::cout << path << " -> " << (out / (stem + "_labels.png")).string() << "\n";
            }
        } else if (eval_cmd->parsed()) {
            const ModelBundle bundle = load_bundle(model_path);
            const Dataset ds = obtain_dataset(bundle.config, g.manifest, g.classes);
            const ExperimentReport r = evaluate_bundle(bundle, ds, working_split(ds, bundle.config, g.use_all).test);
            write_json(out / "eval.json", report_to_json(r));
            std::cout << "mean PA " << r.accuracy.mean << "\n";
        } else if (sweep_cmd->parsed()) {
            const Dataset ds = obtain_dataset(config, g.manifest, g.classes);
            const std::vector<SweepPoint> points = run_size_sweep(ds, sizes, config);
            json j = json::array();
            json timing = json::array();
            for (const SweepPoint& p : points) {
                j.push_back({{"size", p.size}, {"train", p.train}, {"report", report_to_json(p.report)}});
                timing.push_back({{"size", p.size}, {"wall_clock_seconds", p.report.wall_clock_seconds}});
                std::cout << "size " << p.size << ": mean PA " << p.report.accuracy.mean << "\n";
            }
            write_json(out / "sweep.json", j);
            write_json(out / "timing.json", timing);
        } else if (pipe_cmd->parsed()) {
            const Dataset ds = obtain_dataset(config, g.manifest, g.classes);
            const ExperimentResult result = run_experiment(ds, config);
            write_json(out / "report.json", report_to_json(result.report));
            write_json(out / "timing.json", {{"wall_clock_seconds", result.report.wall_clock_seconds}});
            save_bundle(result.bundle, out / "model.gshd");
            std::cout << "mean PA " << result.report.accuracy.mean << " (report in " << (out / "report.json").string()
                      << ")\n";
        }
    } catch (const Error& e) {
        std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
