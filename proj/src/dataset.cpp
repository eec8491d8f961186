#include "gshdl/dataset.hpp"

#include "gshdl/error.hpp"
#include "gshdl/image_io.hpp"
#include "gshdl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace gshdl {

namespace {

std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return fields;
}

std::string strip(const std::string& s)
{
    const auto b = s.find_first_not_of(" \r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \r\n");
    return s.substr(b, e - b + 1);
}

std::array<std::uint8_t, 3> parse_color(const std::string& text, const std::string& where)
{
    unsigned r = 0, g = 0, b = 0;
    if (text.size() != 7 || text[0] != '#' || std::sscanf(text.c_str() + 1, "%02x%02x%02x", &r, &g, &b) != 3) {
        throw Error(ErrorKind::ingestion, where + ": colour must look like #RRGGBB");
    }
    return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
}

std::string format_color(const std::array<std::uint8_t, 3>& c)
{
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02X%02X%02X", c[0], c[1], c[2]);
    return buf;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p)
{
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
}

void fnv(std::uint64_t& h, const void* data, std::size_t n)
{
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
}

} // namespace

std::optional<int> ClassMap::label_for_code(int code) const
{
    if (void_class && void_class->code == code) return LabelGrid::kVoid;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].code == code) return static_cast<int>(i);
    }
    return std::nullopt;
}

ClassMap ClassMap::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::ingestion, "cannot open class map " + path.string());
    ClassMap map;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = strip(line);
        if (line.empty() || line[0] == '#') continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        const auto f = split_tabs(line);
        if (f.size() != 3) throw Error(ErrorKind::ingestion, where + ": expected code<TAB>name<TAB>#RRGGBB");
        ClassInfo info;
        try {
            std::size_t used = 0;
            info.code = std::stoi(f[0], &used);
            if (used != f[0].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw Error(ErrorKind::ingestion, where + ": class code is not an integer");
        }
        if (info.code < 0 || info.code > 255) throw Error(ErrorKind::ingestion, where + ": class code outside 0..255");
        info.name = f[1];
        info.color = parse_color(f[2], where);
        if (map.label_for_code(info.code)) throw Error(ErrorKind::ingestion, where + ": duplicate class code");
        if (info.name == "void") {
            if (map.void_class) throw Error(ErrorKind::ingestion, where + ": second void entry");
            map.void_class = info;
        } else {
            map.classes.push_back(info);
        }
    }
    return map;
}

void ClassMap::save(const std::filesystem::path& path) const
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    for (const ClassInfo& c : classes) out << c.code << '\t' << c.name << '\t' << format_color(c.color) << '\n';
    if (void_class) out << void_class->code << '\t' << void_class->name << '\t' << format_color(void_class->color) << '\n';
}

ClassMap ClassMap::standard(std::size_t n)
{
    static constexpr std::array<std::array<std::uint8_t, 3>, 8> palette{{
        {228, 26, 28}, {55, 126, 184}, {77, 175, 74}, {152, 78, 163},
        {255, 127, 0}, {255, 255, 51}, {166, 86, 40}, {247, 129, 191},
    }};
    ClassMap map;
    for (std::size_t i = 0; i < n; ++i) {
        map.classes.push_back({static_cast<int>(i), "class" + std::to_string(i), palette[i % palette.size()]});
    }
    map.void_class = ClassInfo{255, "void", {0, 0, 0}};
    return map;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const
{
    Dataset out;
    out.class_map = class_map;
    out.samples.reserve(indices.size());
    for (std::size_t i : indices) out.samples.push_back(samples.at(i));
    return out;
}

Dataset load_dataset(const std::filesystem::path& manifest, const std::filesystem::path& class_map)
{
    std::ifstream in(manifest);
    if (!in) throw Error(ErrorKind::ingestion, "cannot open manifest " + manifest.string());
    const std::filesystem::path base = manifest.parent_path();
    Dataset ds;
    ds.class_map = ClassMap::load(class_map.empty() ? base / "classes.tsv" : class_map);

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = strip(line);
        if (line.empty() || line[0] == '#') continue;
        const std::string record = manifest.string() + ":" + std::to_string(lineno);
        const auto f = split_tabs(line);
        if (f.size() != 2) throw Error(ErrorKind::ingestion, "record " + record + ": expected image<TAB>mask");
        Sample s;
        s.name = std::filesystem::path(f[0]).stem().string();
        try {
            s.image = to_grid(read_image8(resolve(base, f[0])));
            std::size_t h = 0, w = 0;
            const std::vector<int> codes = read_mask_codes(resolve(base, f[1]), h, w);
            if (h != s.image.height() || w != s.image.width()) {
                throw Error(ErrorKind::ingestion, "image is " + std::to_string(s.image.height()) + "x" +
                                                      std::to_string(s.image.width()) + " but mask is " +
                                                      std::to_string(h) + "x" + std::to_string(w));
            }
            s.labels = LabelGrid(h, w);
            for (std::size_t i = 0; i < codes.size(); ++i) {
                const auto label = ds.class_map.label_for_code(codes[i]);
                if (!label) throw Error(ErrorKind::ingestion, "unknown label code " + std::to_string(codes[i]));
                s.labels.labels[i] = *label;
            }
        } catch (const Error& e) {
            throw Error(ErrorKind::ingestion, "record " + record + " (" + f[0] + "): " + e.what());
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    std::ofstream manifest(dir / "manifest.tsv");
    if (!manifest) throw Error(ErrorKind::io, "cannot write " + (dir / "manifest.tsv").string());
    const int void_code = dataset.class_map.void_class ? dataset.class_map.void_class->code : 255;
    for (const Sample& s : dataset.samples) {
        const std::string image = "images/" + s.name + ".png";
        const std::string mask = "masks/" + s.name + ".png";
        write_image8(dir / image, to_image8(s.image));
        LabelGrid codes = s.labels;
        for (int& l : codes.labels) l = l < 0 ? void_code : dataset.class_map.classes.at(static_cast<std::size_t>(l)).code;
        write_mask(dir / mask, codes);
        manifest << image << '\t' << mask << '\n';
    }
    dataset.class_map.save(dir / "classes.tsv");
}

Dataset generate_synthetic(const SyntheticSpec& spec)
{
    // Per-class texture: wave direction (degrees) and period (pixels).
    static constexpr std::array<double, 6> kAngle{20.0, 65.0, 110.0, 155.0, 40.0, 130.0};
    static constexpr std::array<double, 6> kPeriod{5.0, 7.0, 5.0, 7.0, 9.0, 4.0};
    if (spec.num_classes < 2 || spec.num_classes > kAngle.size()) {
        throw Error(ErrorKind::config, "synthetic datasets have between 2 and 6 classes");
    }
    if (!(spec.noise >= 0.0)) throw Error(ErrorKind::config, "synthetic noise must be non-negative");
    if (spec.size < 8) throw Error(ErrorKind::config, "synthetic images must be at least 8 pixels wide");

    Dataset ds;
    ds.class_map = ClassMap::standard(spec.num_classes);
    const std::size_t n = spec.size;
    const int digits = static_cast<int>(std::to_string(std::max<std::size_t>(spec.num_images, 1) - 1).size());
    for (std::size_t img = 0; img < spec.num_images; ++img) {
        Rng rng(derive_seed(spec.seed, img));
        const std::size_t regions = 3 + rng.index(4);
        std::vector<double> sy(regions), sx(regions), phase(regions);
        std::vector<int> cls(regions);
        for (std::size_t r = 0; r < regions; ++r) {
            sy[r] = rng.uniform(0.0, static_cast<double>(n));
            sx[r] = rng.uniform(0.0, static_cast<double>(n));
            cls[r] = static_cast<int>(rng.index(spec.num_classes));
            phase[r] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        }
        Sample s;
        char name[32];
        std::snprintf(name, sizeof name, "synth_%0*zu", digits, img);
        s.name = name;
        s.image = Grid2D(n, n, 3);
        s.labels = LabelGrid(n, n);
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) {
                std::size_t best = 0;
                double best_d = 0.0;
                for (std::size_t r = 0; r < regions; ++r) {
                    const double dy = static_cast<double>(y) - sy[r];
                    const double dx = static_cast<double>(x) - sx[r];
                    const double d = dy * dy + dx * dx;
                    if (r == 0 || d < best_d) {
                        best = r;
                        best_d = d;
                    }
                }
                const auto c = static_cast<std::size_t>(cls[best]);
                const double theta = kAngle[c] * std::numbers::pi / 180.0;
                const double t = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
                const double v = std::clamp(0.5 + 0.25 * std::sin(2.0 * std::numbers::pi * t / kPeriod[c] + phase[best]) +
                                                rng.normal(0.0, spec.noise),
                                            0.0, 1.0);
                s.labels(y, x) = cls[best];
                for (std::size_t ch = 0; ch < 3; ++ch) s.image(ch, y, x) = v;
            }
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

std::uint64_t dataset_hash(const Dataset& dataset)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Sample& s : dataset.samples) {
        fnv(h, s.name.data(), s.name.size());
        fnv(h, s.image.data(), s.image.size() * sizeof(double));
        fnv(h, s.labels.labels.data(), s.labels.labels.size() * sizeof(int));
    }
    return h;
}

int dominant_label(const LabelGrid& labels, std::size_t num_classes)
{
    std::vector<std::size_t> counts(num_classes, 0);
    for (int l : labels.labels) {
        if (l >= 0 && static_cast<std::size_t>(l) < num_classes) ++counts[static_cast<std::size_t>(l)];
    }
    const auto it = std::max_element(counts.begin(), counts.end());
    if (it == counts.end() || *it == 0) return LabelGrid::kVoid;
    return static_cast<int>(it - counts.begin());
}

} // namespace gshdl
