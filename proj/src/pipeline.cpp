#include "gshdl/pipeline.hpp"

#include "gshdl/error.hpp"
#include "gshdl/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <initializer_list>
#include <map>
#include <numeric>
#include <set>

namespace gshdl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

PipelineConfig PipelineConfig::desk()
{
    PipelineConfig c;
    c.profile = "desk";
    c.scatter.color = ColorMode::luminance;
    c.layers = {{32, 3}, {24, 5}, {16, 7}, {8, 9}};
    c.prior_patches = 4000;
    c.rbm.crop_size = 32;
    c.rbm.learning_rate = 0.003;
    c.crf.crop_size = 32;
    c.report_stages = {0, 1};
    return c;
}

PipelineConfig PipelineConfig::paper()
{
    PipelineConfig c;
    c.profile = "paper";
    c.scatter.color = ColorMode::independent;
    c.layers = {{200, 3}, {150, 5}, {100, 7}, {50, 9}};
    c.prior_patches = 20000;
    c.rbm.learning_rate = 0.003;
    c.prune = true;
    c.report_stages = {0, 1, 2, 3};
    return c;
}

PipelineConfig PipelineConfig::for_profile(const std::string& name)
{
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw Error(ErrorKind::config, "unknown profile '" + name + "' (expected desk or paper)");
}

void PipelineConfig::validate() const
{
    scatter.validate();
    rbm.validate();
    crf.optimizer.validate();
    inference.validate();
    crf.loss.inference.validate();
    if (folds == 0) throw Error(ErrorKind::config, "folds must be at least 1");
    for (const LayerSpec& l : layers) {
        if (l.num_filters == 0 || l.filter_size % 2 == 0) {
            throw Error(ErrorKind::config, "layers need at least one filter and an odd filter size");
        }
    }
    if (deployed_stage() > layers.size()) throw Error(ErrorKind::config, "crf_stage exceeds the number of layers");
    for (std::size_t s : report_stages) {
        if (s > layers.size()) throw Error(ErrorKind::config, "report stage exceeds the number of layers");
    }
    if (prune && prune_folds < 2) throw Error(ErrorKind::config, "pruning needs at least two folds");
    if (!(crf.l2 >= 0.0)) throw Error(ErrorKind::config, "crf.l2 must be non-negative");
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where)
{
    if (!j.is_object()) throw Error(ErrorKind::config, where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw Error(ErrorKind::config, "unknown config key " + where + "." + key);
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, std::string("config key ") + key + ": " + e.what());
    }
}

} // namespace

json config_to_json(const PipelineConfig& c)
{
    json layers = json::array();
    for (const LayerSpec& l : c.layers) layers.push_back({{"num_filters", l.num_filters}, {"filter_size", l.filter_size}});
    return {
        {"profile", c.profile},
        {"seed", c.seed},
        {"synthetic", {{"num_images", c.synthetic.num_images}, {"size", c.synthetic.size},
                       {"num_classes", c.synthetic.num_classes}, {"noise", c.synthetic.noise}}},
        {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
        {"folds", c.folds},
        {"scatter", {{"num_scales", c.scatter.num_scales},
                     {"orientations_deg", c.scatter.orientations_deg},
                     {"log_k_finest", c.scatter.log_k_finest},
                     {"dual_resolution", c.scatter.dual_resolution},
                     {"color", c.scatter.color == ColorMode::luminance ? "luminance" : "independent"}}},
        {"layers", layers},
        {"prior_patches", c.prior_patches},
        {"rbm", {{"epochs", c.rbm.epochs}, {"batch_size", c.rbm.batch_size}, {"learning_rate", c.rbm.learning_rate},
                 {"cd_steps", c.rbm.cd_steps}, {"momentum", c.rbm.momentum}, {"crop_size", c.rbm.crop_size}}},
        {"prune", c.prune},
        {"pruning", {{"tolerance", c.pruning.tolerance}, {"subsets_per_size", c.pruning.subsets_per_size}}},
        {"prune_folds", c.prune_folds},
        {"prune_crf_iterations", c.prune_crf_iterations},
        {"crf", {{"max_iterations", c.crf.optimizer.max_iterations},
                 {"gradient_tolerance", c.crf.optimizer.gradient_tolerance},
                 {"history_size", c.crf.optimizer.history_size},
                 {"line_search_max_steps", c.crf.optimizer.line_search_max_steps},
                 {"l2", c.crf.l2},
                 {"pairwise", c.crf.pairwise},
                 {"warm_start_iterations", c.crf.warm_start_iterations},
                 {"crop_size", c.crf.crop_size},
                 {"stride2", c.crf.loss.stride2},
                 {"inference_iterations", c.crf.loss.inference.max_iterations},
                 {"damping", c.crf.loss.inference.damping},
                 {"fixed_beta", c.crf.fixed_beta ? json(*c.crf.fixed_beta) : json(nullptr)}}},
        {"inference", {{"max_iterations", c.inference.max_iterations}, {"damping", c.inference.damping},
                       {"tolerance", c.inference.tolerance}}},
        {"crf_stage", c.crf_stage ? json(*c.crf_stage) : json(nullptr)},
        {"report_stages", c.report_stages},
        {"baselines", c.baselines},
    };
}

PipelineConfig config_from_json(const json& j, PipelineConfig c)
{
    check_keys(j, {"profile", "seed", "synthetic", "split", "folds", "scatter", "layers", "prior_patches", "rbm", "prune",
                   "pruning", "prune_folds", "prune_crf_iterations", "crf", "inference", "crf_stage", "report_stages",
                   "baselines"},
               "config");
    if (j.contains("profile")) {
        const std::string profile = j.at("profile").get<std::string>();
        if (profile != c.profile) c = PipelineConfig::for_profile(profile);
    }
    read(j, "seed", c.seed);
    if (j.contains("synthetic")) {
        const json& s = j.at("synthetic");
        check_keys(s, {"num_images", "size", "num_classes", "noise"}, "synthetic");
        read(s, "num_images", c.synthetic.num_images);
        read(s, "size", c.synthetic.size);
        read(s, "num_classes", c.synthetic.num_classes);
        read(s, "noise", c.synthetic.noise);
    }
    if (j.contains("split")) {
        const json& s = j.at("split");
        check_keys(s, {"train", "val", "test"}, "split");
        read(s, "train", c.split.train);
        read(s, "val", c.split.val);
        read(s, "test", c.split.test);
    }
    read(j, "folds", c.folds);
    if (j.contains("scatter")) {
        const json& s = j.at("scatter");
        check_keys(s, {"num_scales", "orientations_deg", "log_k_finest", "dual_resolution", "color"}, "scatter");
        read(s, "num_scales", c.scatter.num_scales);
        read(s, "orientations_deg", c.scatter.orientations_deg);
        read(s, "log_k_finest", c.scatter.log_k_finest);
        read(s, "dual_resolution", c.scatter.dual_resolution);
        if (s.contains("color")) {
            const std::string mode = s.at("color").get<std::string>();
            if (mode == "luminance") {
                c.scatter.color = ColorMode::luminance;
            } else if (mode == "independent") {
                c.scatter.color = ColorMode::independent;
            } else {
                throw Error(ErrorKind::config, "scatter.color must be luminance or independent");
            }
        }
    }
    if (j.contains("layers")) {
        c.layers.clear();
        for (const json& l : j.at("layers")) {
            LayerSpec spec;
            if (l.is_array() && l.size() == 2) {
                spec = {l[0].get<std::size_t>(), l[1].get<std::size_t>()};
            } else {
                check_keys(l, {"num_filters", "filter_size"}, "layers[]");
                read(l, "num_filters", spec.num_filters);
                read(l, "filter_size", spec.filter_size);
            }
            c.layers.push_back(spec);
        }
    }
    read(j, "prior_patches", c.prior_patches);
    if (j.contains("rbm")) {
        const json& r = j.at("rbm");
        check_keys(r, {"epochs", "batch_size", "learning_rate", "cd_steps", "momentum", "crop_size"}, "rbm");
        read(r, "epochs", c.rbm.epochs);
        read(r, "batch_size", c.rbm.batch_size);
        read(r, "learning_rate", c.rbm.learning_rate);
        read(r, "cd_steps", c.rbm.cd_steps);
        read(r, "momentum", c.rbm.momentum);
        read(r, "crop_size", c.rbm.crop_size);
    }
    read(j, "prune", c.prune);
    if (j.contains("pruning")) {
        const json& p = j.at("pruning");
        check_keys(p, {"tolerance", "subsets_per_size"}, "pruning");
        read(p, "tolerance", c.pruning.tolerance);
        read(p, "subsets_per_size", c.pruning.subsets_per_size);
    }
    read(j, "prune_folds", c.prune_folds);
    read(j, "prune_crf_iterations", c.prune_crf_iterations);
    if (j.contains("crf")) {
        const json& r = j.at("crf");
        check_keys(r, {"max_iterations", "gradient_tolerance", "history_size", "line_search_max_steps", "l2", "pairwise",
                       "warm_start_iterations", "crop_size", "stride2", "inference_iterations", "damping", "fixed_beta"},
                   "crf");
        read(r, "max_iterations", c.crf.optimizer.max_iterations);
        read(r, "gradient_tolerance", c.crf.optimizer.gradient_tolerance);
        read(r, "history_size", c.crf.optimizer.history_size);
        read(r, "line_search_max_steps", c.crf.optimizer.line_search_max_steps);
        read(r, "l2", c.crf.l2);
        read(r, "pairwise", c.crf.pairwise);
        read(r, "warm_start_iterations", c.crf.warm_start_iterations);
        read(r, "crop_size", c.crf.crop_size);
        read(r, "stride2", c.crf.loss.stride2);
        read(r, "inference_iterations", c.crf.loss.inference.max_iterations);
        read(r, "damping", c.crf.loss.inference.damping);
        if (r.contains("fixed_beta")) {
            c.crf.fixed_beta = r.at("fixed_beta").is_null() ? std::nullopt
                                                            : std::optional<double>(r.at("fixed_beta").get<double>());
        }
    }
    if (j.contains("inference")) {
        const json& r = j.at("inference");
        check_keys(r, {"max_iterations", "damping", "tolerance"}, "inference");
        read(r, "max_iterations", c.inference.max_iterations);
        read(r, "damping", c.inference.damping);
        read(r, "tolerance", c.inference.tolerance);
    }
    if (j.contains("crf_stage")) {
        c.crf_stage = j.at("crf_stage").is_null() ? std::nullopt
                                                  : std::optional<std::size_t>(j.at("crf_stage").get<std::size_t>());
    }
    read(j, "report_stages", c.report_stages);
    read(j, "baselines", c.baselines);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

Chunk encode_class_map(const ClassMap& map)
{
    ByteWriter w;
    auto put = [&w](const ClassInfo& c) {
        w.i32(c.code);
        w.str(c.name);
        for (std::uint8_t v : c.color) w.u8(v);
    };
    w.u64(map.classes.size());
    for (const ClassInfo& c : map.classes) put(c);
    w.u8(map.void_class ? 1 : 0);
    if (map.void_class) put(*map.void_class);
    return {make_tag("CMAP"), std::move(w.bytes())};
}

ClassMap decode_class_map(const Chunk& chunk)
{
    expect_tag(chunk, "CMAP");
    ByteReader r(chunk.payload, "CMAP");
    auto get = [&r] {
        ClassInfo c;
        c.code = r.i32();
        c.name = r.str();
        for (std::uint8_t& v : c.color) v = r.u8();
        return c;
    };
    ClassMap map;
    map.classes.resize(r.count(8));
    for (ClassInfo& c : map.classes) c = get();
    if (r.u8() != 0) map.void_class = get();
    if (!r.at_end()) throw Error(ErrorKind::format, "trailing bytes in chunk CMAP");
    return map;
}

} // namespace

std::vector<std::uint8_t> encode_bundle(const ModelBundle& b)
{
    std::vector<Chunk> chunks;
    {
        ByteWriter w;
        w.str(config_to_json(b.config).dump());
        chunks.push_back({make_tag("CONF"), std::move(w.bytes())});
    }
    {
        ByteWriter w;
        w.u64(b.bank_fingerprint);
        w.u64(b.dataset_hash);
        w.u64(b.config.seed);
        w.u64(b.layers.size());
        w.u64(b.crf_stage);
        w.u8(b.crf ? 1 : 0);
        chunks.push_back({make_tag("PROV"), std::move(w.bytes())});
    }
    chunks.push_back(encode_class_map(b.class_map));
    chunks.push_back(encode_stats(b.input_stats));
    for (const LayerModel& l : b.layers) {
        chunks.push_back(encode_priors(l.priors));
        chunks.push_back(encode_rbm(l.rbm));
        chunks.push_back(encode_stats(l.output_stats));
    }
    if (b.crf) chunks.push_back(encode_crf(*b.crf));
    return encode_container(chunks);
}

ModelBundle decode_bundle(std::span<const std::uint8_t> bytes)
{
    const std::vector<Chunk> chunks = decode_container(bytes);
    std::size_t next = 0;
    auto take = [&](std::string_view tag) -> const Chunk& {
        if (next >= chunks.size()) throw Error(ErrorKind::format, "bundle ends before chunk " + std::string(tag));
        expect_tag(chunks[next], tag);
        return chunks[next++];
    };
    ModelBundle b;
    {
        ByteReader r(take("CONF").payload, "CONF");
        try {
            b.config = config_from_json(json::parse(r.str()), PipelineConfig::desk());
        } catch (const json::exception& e) {
            throw Error(ErrorKind::format, std::string("bundle configuration is not valid JSON: ") + e.what());
        }
    }
    std::size_t num_layers = 0;
    bool has_crf = false;
    {
        ByteReader r(take("PROV").payload, "PROV");
        b.bank_fingerprint = r.u64();
        b.dataset_hash = r.u64();
        if (r.u64() != b.config.seed) throw Error(ErrorKind::format, "bundle provenance disagrees with its configuration");
        num_layers = r.u64();
        b.crf_stage = r.u64();
        has_crf = r.u8() != 0;
        if (num_layers > 64 || b.crf_stage > num_layers) throw Error(ErrorKind::format, "implausible bundle layout");
    }
    b.class_map = decode_class_map(take("CMAP"));
    b.input_stats = decode_stats(take("STAT"));
    for (std::size_t i = 0; i < num_layers; ++i) {
        LayerModel l;
        l.priors = decode_priors(take("PRIR"));
        l.rbm = decode_rbm(take("CRBM"));
        l.output_stats = decode_stats(take("STAT"));
        b.layers.push_back(std::move(l));
    }
    if (has_crf) b.crf = decode_crf(take("CRFW"));
    if (next != chunks.size()) throw Error(ErrorKind::format, "unexpected chunk " + chunks[next].tag_string());
    return b;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path)
{
    write_file_bytes(path, encode_bundle(bundle));
}

ModelBundle load_bundle(const std::filesystem::path& path) { return decode_bundle(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Feature extraction

std::vector<Grid2D> extract_stages(const ModelBundle& bundle, const FilterBank& bank, const Grid2D& image,
                                   std::size_t stage)
{
    if (stage > bundle.layers.size()) throw Error(ErrorKind::config, "requested stage exceeds the trained layers");
    if (bank.fingerprint() != bundle.bank_fingerprint) {
        throw Error(ErrorKind::config, "filter bank does not match the one the model was trained with");
    }
    std::vector<Grid2D> out;
    out.push_back(bundle.input_stats.apply(scatter(image, bank, bundle.config.scatter).concatenated()));
    for (std::size_t l = 0; l < stage; ++l) {
        const LayerModel& m = bundle.layers[l];
        out.push_back(m.output_stats.apply(feature_forward(m.rbm.layer, out.back())));
    }
    return out;
}

LabelGrid segment_image(const ModelBundle& bundle, const FilterBank& bank, const Grid2D& image)
{
    if (!bundle.crf) throw Error(ErrorKind::config, "model has no trained CRF");
    const std::vector<Grid2D> stages = extract_stages(bundle, bank, image, bundle.crf_stage);
    return segment(build_potentials(stages.back(), image, bundle.crf->weights), bundle.crf->inference);
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

constexpr std::uint64_t kSaltPatches = 10;
constexpr std::uint64_t kSaltRbm = 20;
constexpr std::uint64_t kSaltPrune = 30;
constexpr std::uint64_t kSaltCrf = 40;
constexpr std::uint64_t kSaltFolds = 50;
constexpr std::uint64_t kSaltSweep = 60;

std::vector<Grid2D> fit_and_apply(std::vector<Grid2D>& raw, const std::vector<std::size_t>& train,
                                  ChannelStats& stats)
{
    std::vector<Grid2D> train_grids;
    train_grids.reserve(train.size());
    for (std::size_t i : train) train_grids.push_back(raw[i]);
    stats = ChannelStats::fit(train_grids);
    std::vector<Grid2D> out;
    out.reserve(raw.size());
    for (const Grid2D& g : raw) out.push_back(g.empty() ? Grid2D() : stats.apply(g));
    return out;
}

std::vector<CrfExample> crf_examples(const Dataset& ds, const std::vector<Grid2D>& features,
                                     const std::vector<std::size_t>& idx)
{
    std::vector<CrfExample> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back({features[i], ds.samples[i].image, ds.samples[i].labels});
    return out;
}

ConfusionMatrix score(const Dataset& ds, const std::vector<Grid2D>& features, const std::vector<std::size_t>& test,
                      const CrfWeights& weights, const InferenceOptions& inference)
{
    ConfusionMatrix cm(ds.num_classes());
    for (std::size_t i : test) {
        cm.add(segment(build_potentials(features[i], ds.samples[i].image, weights), inference), ds.samples[i].labels);
    }
    return cm;
}

CrfTrainOptions quick_crf(const PipelineConfig& config, std::uint64_t seed)
{
    CrfTrainOptions o;
    o.optimizer = config.crf.optimizer;
    o.optimizer.max_iterations = config.prune_crf_iterations;
    o.loss.inference.max_iterations = 0;
    o.loss.stride2 = true;
    o.pairwise = false;
    o.warm_start_iterations = 0;
    o.l2 = config.crf.l2;
    o.seed = seed;
    o.fixed_beta = config.crf.fixed_beta;
    return o;
}

// Cross-validated PA of a unary-only CRF on a channel subset of `raw`.
SubsetEvaluator make_prune_evaluator(const Dataset& ds, const std::vector<Grid2D>& raw, const ChannelStats& stats,
                                     const std::vector<std::size_t>& train, const PipelineConfig& config,
                                     std::uint64_t seed)
{
    const std::vector<Fold> cv = make_cv_folds(train.size(), config.prune_folds, seed);
    return [&ds, &raw, &stats, train, cv, &config, seed](std::span<const std::size_t> subset) {
        ChannelStats sub;
        for (std::size_t c : subset) {
            sub.mean.push_back(stats.mean.at(c));
            sub.stddev.push_back(stats.stddev.at(c));
        }
        std::vector<Grid2D> feats(ds.size());
        for (std::size_t i : train) feats[i] = sub.apply(raw[i].select_channels(subset));
        ConfusionMatrix cm(ds.num_classes());
        InferenceOptions argmax;
        argmax.max_iterations = 0;
        for (const Fold& f : cv) {
            std::vector<std::size_t> fit_idx, val_idx;
            for (std::size_t k : f.train) fit_idx.push_back(train[k]);
            for (std::size_t k : f.val) val_idx.push_back(train[k]);
            const auto examples = crf_examples(ds, feats, fit_idx);
            const CrfTrainResult model = train_crf(examples, ds.num_classes(), quick_crf(config, seed));
            for (std::size_t i : val_idx) {
                cm.add(segment(build_potentials(feats[i], ds.samples[i].image, model.weights), argmax),
                       ds.samples[i].labels);
            }
        }
        return class_accuracy(cm).mean;
    };
}

// Trains layer l on `current` (standardised stage-l features indexed like
// the dataset) and replaces `current` with the standardised layer output.
LayerModel fit_layer(const Dataset& ds, std::vector<Grid2D>& current, const std::vector<std::size_t>& train,
                     const std::vector<std::size_t>& used, std::size_t l, const PipelineConfig& config,
                     std::uint64_t seed)
{
    const LayerSpec& spec = config.layers.at(l);
    std::vector<Grid2D> train_inputs;
    train_inputs.reserve(train.size());
    for (std::size_t i : train) train_inputs.push_back(current[i]);

    LayerModel model;
    const PatchMatrix patches =
        sample_patches(train_inputs, spec.filter_size, config.prior_patches, derive_seed(seed, kSaltPatches + l));
    const std::size_t k = std::min(spec.num_filters, patches.dimension());
    const std::size_t spares = std::min(spec.num_filters, patches.dimension() - k);
    model.priors = learn_pca_filters(patches, k, spares);

    TrainOptions opts = config.rbm;
    opts.seed = derive_seed(seed, kSaltRbm + l);
    TrainedRbm trained = train_layer(train_inputs, spec, &model.priors, opts);
    model.rbm.layer = std::move(trained.layer);
    model.rbm.trace = std::move(trained.trace);
    model.rbm.selected.resize(model.rbm.layer.num_filters());
    std::iota(model.rbm.selected.begin(), model.rbm.selected.end(), std::size_t{0});

    std::vector<Grid2D> hidden(ds.size());
    for (std::size_t i : used) hidden[i] = feature_forward(model.rbm.layer, current[i]);

    if (config.prune) {
        ChannelStats full_stats;
        (void)fit_and_apply(hidden, train, full_stats);
        PruneOptions popts = config.pruning;
        popts.seed = derive_seed(seed, kSaltPrune + l);
        const PruneResult pruned = prune_filters(
            model.rbm.layer, make_prune_evaluator(ds, hidden, full_stats, train, config, popts.seed), popts);
        model.rbm.layer = pruned.layer;
        model.rbm.selected = pruned.selected;
        for (std::size_t i : used) hidden[i] = hidden[i].select_channels(pruned.selected);
    }
    current = fit_and_apply(hidden, train, model.output_stats);
    return model;
}

ModelBundle empty_bundle(const Dataset& ds, const PipelineConfig& config)
{
    ModelBundle bundle;
    bundle.config = config;
    bundle.class_map = ds.class_map;
    bundle.dataset_hash = dataset_hash(ds);
    bundle.crf_stage = config.deployed_stage();
    bundle.bank_fingerprint = build_filter_bank(config.scatter).fingerprint();
    return bundle;
}

} // namespace

FoldOutcome run_fold(const Dataset& ds, const std::vector<std::size_t>& train, const std::vector<std::size_t>& test,
                     const PipelineConfig& config, std::size_t fold_index)
{
    config.validate();
    if (train.empty() || test.empty()) throw Error(ErrorKind::config, "a fold needs training and test images");
    if (ds.num_classes() < 2) throw Error(ErrorKind::config, "segmentation needs at least two classes");
    const std::uint64_t seed = derive_seed(config.seed, 1000 + fold_index);

    FoldOutcome out{empty_bundle(ds, config), FoldReport{}, ConfusionMatrix(ds.num_classes())};
    ModelBundle& bundle = out.bundle;
    const FilterBank bank = build_filter_bank(config.scatter);

    // Only images taking part in this fold are processed.
    std::vector<std::size_t> used = train;
    used.insert(used.end(), test.begin(), test.end());
    std::sort(used.begin(), used.end());
    used.erase(std::unique(used.begin(), used.end()), used.end());

    std::vector<Grid2D> raw(ds.size());
    for (std::size_t i : used) raw[i] = scatter(ds.samples[i].image, bank, config.scatter).concatenated();
    std::vector<Grid2D> current = fit_and_apply(raw, train, bundle.input_stats);

    std::set<std::size_t> wanted(config.report_stages.begin(), config.report_stages.end());
    wanted.insert(config.deployed_stage());
    std::map<std::size_t, std::vector<Grid2D>> stage_features;
    if (wanted.count(0) != 0) stage_features[0] = current;

    const std::size_t last_needed = *wanted.rbegin();
    for (std::size_t l = 0; l < last_needed; ++l) {
        LayerModel model = fit_layer(ds, current, train, used, l, config, seed);
        out.report.layer_filters.push_back(model.rbm.layer.num_filters());
        bundle.layers.push_back(std::move(model));
        if (wanted.count(l + 1) != 0) stage_features[l + 1] = current;
    }

    CrfTrainOptions crf_opts = config.crf;
    crf_opts.seed = derive_seed(seed, kSaltCrf);
    for (std::size_t stage : wanted) {
        const std::vector<Grid2D>& feats = stage_features.at(stage);
        const CrfTrainResult model = train_crf(crf_examples(ds, feats, train), ds.num_classes(), crf_opts);
        const ConfusionMatrix cm = score(ds, feats, test, model.weights, config.inference);
        if (stage == config.deployed_stage()) {
            bundle.crf = CrfRecord{model.weights, config.inference};
            out.confusion = cm;
            out.report.accuracy = class_accuracy(cm);
        }
        if (std::find(config.report_stages.begin(), config.report_stages.end(), stage) != config.report_stages.end() ||
            stage == config.deployed_stage()) {
            out.report.stages.push_back({stage, class_accuracy(cm).mean});
        }
    }

    if (config.baselines) {
        const std::vector<Grid2D>& feats = stage_features.at(config.deployed_stage());
        CrfTrainOptions unary = crf_opts;
        unary.pairwise = false;
        const CrfTrainResult model = train_crf(crf_examples(ds, feats, train), ds.num_classes(), unary);
        out.report.unary_only_pa = class_accuracy(score(ds, feats, test, model.weights, config.inference)).mean;

        std::vector<std::uint64_t> counts(ds.num_classes(), 0);
        for (std::size_t i : train) {
            for (int l : ds.samples[i].labels.labels) {
                if (l >= 0) ++counts[static_cast<std::size_t>(l)];
            }
        }
        const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        ConfusionMatrix cm(ds.num_classes());
        for (std::size_t i : test) {
            const LabelGrid& truth = ds.samples[i].labels;
            cm.add(LabelGrid(truth.height, truth.width, majority), truth);
        }
        out.report.majority_pa = class_accuracy(cm).mean;
    }

    out.report.fold = fold_index;
    out.report.train_images = train.size();
    out.report.test_images = test.size();
    return out;
}

ExperimentResult run_experiment(const Dataset& ds, const PipelineConfig& config)
{
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    const std::vector<Fold> folds = make_folds(ds.size(), config.folds, config.split, derive_seed(config.seed, kSaltFolds));
    ExperimentResult result;
    ConfusionMatrix pooled(ds.num_classes());
    for (std::size_t f = 0; f < folds.size(); ++f) {
        FoldOutcome o = run_fold(ds, folds[f].train, folds[f].test, config, f);
        pooled.merge(o.confusion);
        if (f == 0) result.bundle = std::move(o.bundle);
        result.report.folds.push_back(std::move(o.report));
    }
    result.report.accuracy = class_accuracy(pooled);
    for (const ClassInfo& c : ds.class_map.classes) result.report.class_names.push_back(c.name);
    result.report.config = config_to_json(config);
    result.report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

json report_to_json(const ExperimentReport& r)
{
    auto accuracy_json = [&r](const ClassAccuracy& a) {
        json per_class = json::object();
        for (std::size_t i = 0; i < a.per_class.size(); ++i) {
            const std::string name = i < r.class_names.size() ? r.class_names[i] : std::to_string(i);
            per_class[name] = a.present[i] ? json(a.per_class[i]) : json(nullptr);
        }
        return per_class;
    };
    json folds = json::array();
    for (const FoldReport& f : r.folds) {
        json stages = json::array();
        for (const StageScore& s : f.stages) {
            stages.push_back({{"stage", s.stage == 0 ? std::string("HC") : "RBM" + std::to_string(s.stage)},
                              {"mean_pa", s.pa}});
        }
        folds.push_back({
            {"fold", f.fold},
            {"train_images", f.train_images},
            {"test_images", f.test_images},
            {"per_class_pa", accuracy_json(f.accuracy)},
            {"mean_pa", f.accuracy.mean},
            {"stages", stages},
            {"unary_only_pa", f.unary_only_pa ? json(*f.unary_only_pa) : json(nullptr)},
            {"majority_pa", f.majority_pa ? json(*f.majority_pa) : json(nullptr)},
            {"layer_filters", f.layer_filters},
        });
    }
    return {
        {"per_class_pa", accuracy_json(r.accuracy)},
        {"mean_pa", r.accuracy.mean},
        {"folds", folds},
        {"config", r.config},
    };
}

ModelBundle train_feature_stack(const Dataset& ds, const std::vector<std::size_t>& train, const PipelineConfig& config)
{
    config.validate();
    if (train.empty()) throw Error(ErrorKind::config, "no training images");
    const std::uint64_t seed = derive_seed(config.seed, 1000);
    ModelBundle bundle = empty_bundle(ds, config);
    const FilterBank bank = build_filter_bank(config.scatter);
    std::vector<Grid2D> raw(ds.size());
    for (std::size_t i : train) raw[i] = scatter(ds.samples[i].image, bank, config.scatter).concatenated();
    std::vector<Grid2D> current = fit_and_apply(raw, train, bundle.input_stats);
    for (std::size_t l = 0; l < config.layers.size(); ++l) {
        bundle.layers.push_back(fit_layer(ds, current, train, train, l, config, seed));
    }
    return bundle;
}

PruneResult prune_last_layer(ModelBundle& bundle, const Dataset& ds, const std::vector<std::size_t>& train)
{
    if (bundle.layers.empty()) throw Error(ErrorKind::config, "model has no RBM layers to prune");
    const std::size_t top = bundle.layers.size() - 1;
    const FilterBank bank = build_filter_bank(bundle.config.scatter);
    std::vector<Grid2D> hidden(ds.size());
    for (std::size_t i : train) {
        const std::vector<Grid2D> stages = extract_stages(bundle, bank, ds.samples[i].image, top);
        hidden[i] = feature_forward(bundle.layers[top].rbm.layer, stages.back());
    }
    ChannelStats full_stats;
    (void)fit_and_apply(hidden, train, full_stats);
    PruneOptions popts = bundle.config.pruning;
    popts.seed = derive_seed(derive_seed(bundle.config.seed, 1000), kSaltPrune + top);
    LayerModel& model = bundle.layers[top];
    const PruneResult pruned = prune_filters(
        model.rbm.layer, make_prune_evaluator(ds, hidden, full_stats, train, bundle.config, popts.seed), popts);
    std::vector<std::size_t> kept;
    for (std::size_t k : pruned.selected) kept.push_back(model.rbm.selected.at(k));
    model.rbm.layer = pruned.layer;
    model.rbm.selected = kept;
    for (std::size_t i : train) hidden[i] = hidden[i].select_channels(pruned.selected);
    (void)fit_and_apply(hidden, train, model.output_stats);
    bundle.crf.reset();
    return pruned;
}

void fit_bundle_crf(ModelBundle& bundle, const Dataset& ds, const std::vector<std::size_t>& train)
{
    if (bundle.crf_stage > bundle.layers.size()) throw Error(ErrorKind::config, "model lacks the CRF's feature stage");
    const FilterBank bank = build_filter_bank(bundle.config.scatter);
    std::vector<Grid2D> feats(ds.size());
    for (std::size_t i : train) feats[i] = extract_stages(bundle, bank, ds.samples[i].image, bundle.crf_stage).back();
    CrfTrainOptions opts = bundle.config.crf;
    opts.seed = derive_seed(derive_seed(bundle.config.seed, 1000), kSaltCrf);
    const CrfTrainResult model = train_crf(crf_examples(ds, feats, train), ds.num_classes(), opts);
    bundle.crf = CrfRecord{model.weights, bundle.config.inference};
}

ExperimentReport evaluate_bundle(const ModelBundle& bundle, const Dataset& ds, const std::vector<std::size_t>& test)
{
    if (ds.num_classes() != bundle.class_map.size()) throw Error(ErrorKind::config, "dataset and model class counts differ");
    const FilterBank bank = build_filter_bank(bundle.config.scatter);
    ConfusionMatrix cm(ds.num_classes());
    for (std::size_t i : test) cm.add(segment_image(bundle, bank, ds.samples[i].image), ds.samples[i].labels);
    ExperimentReport r;
    r.accuracy = class_accuracy(cm);
    FoldReport f;
    f.test_images = test.size();
    f.accuracy = r.accuracy;
    r.folds.push_back(f);
    for (const ClassInfo& c : ds.class_map.classes) r.class_names.push_back(c.name);
    r.config = config_to_json(bundle.config);
    return r;
}

std::vector<std::size_t> balanced_subset(const Dataset& ds, const std::vector<std::size_t>& pool, std::size_t size,
                                         std::uint64_t seed)
{
    const std::size_t c = ds.num_classes();
    if (size < c) throw Error(ErrorKind::config, "subset size is smaller than the number of classes");
    if (size > pool.size()) throw Error(ErrorKind::config, "subset size exceeds the available training images");
    if (size == pool.size()) return pool;

    std::vector<std::vector<std::size_t>> by_class(c);
    std::vector<std::size_t> unlabeled;
    for (std::size_t i : pool) {
        const int d = dominant_label(ds.samples[i].labels, c);
        (d < 0 ? unlabeled : by_class[static_cast<std::size_t>(d)]).push_back(i);
    }
    Rng rng(seed);
    for (auto& g : by_class) std::shuffle(g.begin(), g.end(), rng.engine());

    // Water-filling: hand out one image per class in round-robin order,
    // skipping classes whose images are exhausted.
    std::vector<std::size_t> taken(c, 0);
    std::vector<std::size_t> out;
    while (out.size() < size) {
        bool progressed = false;
        for (std::size_t k = 0; k < c && out.size() < size; ++k) {
            if (taken[k] < by_class[k].size()) {
                out.push_back(by_class[k][taken[k]++]);
                progressed = true;
            }
        }
        if (!progressed) break;
    }
    for (std::size_t i = 0; out.size() < size && i < unlabeled.size(); ++i) out.push_back(unlabeled[i]);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<SweepPoint> run_size_sweep(const Dataset& ds, const std::vector<std::size_t>& sizes,
                                       const PipelineConfig& config)
{
    config.validate();
    const std::vector<Fold> folds = make_folds(ds.size(), 1, config.split, derive_seed(config.seed, kSaltFolds));
    const Fold& base = folds.front();
    for (std::size_t s : sizes) {
        if (s < ds.num_classes()) throw Error(ErrorKind::config, "sweep size smaller than the number of classes");
        if (s > base.train.size()) throw Error(ErrorKind::config, "sweep size exceeds the training split");
    }
    std::vector<SweepPoint> out;
    for (std::size_t s : sizes) {
        const auto start = std::chrono::steady_clock::now();
        SweepPoint p;
        p.size = s;
        p.train = balanced_subset(ds, base.train, s, derive_seed(config.seed, kSaltSweep + s));
        const FoldOutcome o = run_fold(ds, p.train, base.test, config, 0);
        p.report.accuracy = o.report.accuracy;
        p.report.folds.push_back(o.report);
        for (const ClassInfo& c : ds.class_map.classes) p.report.class_names.push_back(c.name);
        p.report.config = config_to_json(config);
        p.report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.push_back(std::move(p));
    }
    return out;
}

Image8 render_overlay(const Grid2D& image, const LabelGrid& labels, const ClassMap& class_map, double alpha)
{
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::render, "alpha must lie in [0, 1]");
    if (image.height() != labels.height || image.width() != labels.width) {
        throw Error(ErrorKind::render, "image and label sizes differ");
    }
    const Image8 base = to_image8(image);
    Image8 out{base.height, base.width, 3, std::vector<std::uint8_t>(base.height * base.width * 3)};
    for (std::size_t i = 0; i < base.height * base.width; ++i) {
        const int l = labels.labels[i];
        if (l >= static_cast<int>(class_map.size())) {
            throw Error(ErrorKind::render, "label " + std::to_string(l) + " has no class colour");
        }
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::uint8_t px = base.pixels[i * base.channels + (base.channels == 3 ? ch : 0)];
            if (l < 0) {
                out.pixels[i * 3 + ch] = px;
                continue;
            }
            const double colour = class_map.classes[static_cast<std::size_t>(l)].color[ch];
            out.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(alpha * colour + (1.0 - alpha) * px));
        }
    }
    return out;
}

Dataset obtain_dataset(const PipelineConfig& config, const std::filesystem::path& manifest,
                       const std::filesystem::path& class_map)
{
    if (!manifest.empty()) return load_dataset(manifest, class_map);
    SyntheticSpec spec = config.synthetic;
    spec.seed = config.seed;
    return generate_synthetic(spec);
}

} // namespace gshdl
