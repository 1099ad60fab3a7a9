#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "advpatch/common.hpp"
#include "advpatch/core.hpp"
#include "advpatch/png_io.hpp"
#include "json.hpp"

namespace advpatch {

namespace fs = std::filesystem;

struct ImageEntry {
    std::string image_path;  // empty for in-memory synthetic entries
    std::string image_id;
    GroundTruth gt;
};

struct DatasetManifest {
    std::string split;
    std::vector<ImageEntry> entries;
    std::vector<std::string> class_names;
    std::string format;  // voc-xml | coco-json | folder+txt | synthetic
    int skipped = 0;

    int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Manifest + decoded pixels, the form consumed by training and evaluation.
struct LoadedDataset {
    std::vector<Image> images;
    std::vector<GroundTruth> gts;
    std::vector<std::string> class_names;

    size_t size() const { return images.size(); }
    int num_classes() const { return static_cast<int>(class_names.size()); }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& g : e.gt)
            boxes.push_back({{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}},
                             {"class_id", g.class_id}});
        entries.push_back({{"image_path", e.image_path},
                           {"image_id", e.image_id},
                           {"gt", boxes}});
    }
    return nlohmann::json{{"split", m.split},
                          {"entries", entries},
                          {"class_names", m.class_names},
                          {"format", m.format},
                          {"skipped", m.skipped}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.split = j.at("split").get<std::string>();
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        m.format = j.at("format").get<std::string>();
        m.skipped = j.at("skipped").get<int>();
        for (const auto& ej : j.at("entries")) {
            ImageEntry e;
            e.image_path = ej.at("image_path").get<std::string>();
            e.image_id = ej.at("image_id").get<std::string>();
            for (const auto& gj : ej.at("gt")) {
                auto b = gj.at("box").get<std::vector<double>>();
                e.gt.push_back({BBox(b[0], b[1], b[2], b[3]),
                                gj.at("class_id").get<int>()});
            }
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad manifest json: ") + e.what());
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad manifest json " + path + ": " + e.what());
    }
    return manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

enum class ShapeClass { Rectangle = 0, Disk = 1, Triangle = 2 };

inline const std::vector<std::string>& synthetic_class_names() {
    static const std::vector<std::string> names = {"rectangle", "disk",
                                                   "triangle"};
    return names;
}

struct SyntheticSpec {
    int num_images = 100;
    int image_size = 64;
    int shapes_min = 1;
    int shapes_max = 2;
    double size_min = 0.2;  // shape extent as fraction of image side
    double size_max = 0.45;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_images <= 0) throw ConfigError("synthetic.num_images must be > 0");
        if (image_size < 16) throw ConfigError("synthetic.image_size must be >= 16");
        if (shapes_min < 0 || shapes_max < shapes_min)
            throw ConfigError("synthetic.shapes range invalid");
        if (!(size_min > 0.0 && size_min <= size_max && size_max < 1.0))
            throw ConfigError("synthetic.size range invalid");
    }
};

struct SyntheticDataset {
    LoadedDataset data;
    SyntheticSpec spec;
};

namespace detail {

struct RenderedShape {
    GtInstance gt;
};

// Renders one shape with hard edges; returns the tight pixel bbox.
inline RenderedShape render_shape(Image& img, ShapeClass cls, int x1, int y1,
                                  int x2, int y2, const double rgb[3]) {
    int rmin = img.height, rmax = -1, cmin = img.width, cmax = -1;
    auto paint = [&](int r, int c) {
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = rgb[ch];
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
    };
    switch (cls) {
        case ShapeClass::Rectangle:
            for (int r = y1; r < y2; ++r)
                for (int c = x1; c < x2; ++c) paint(r, c);
            break;
        case ShapeClass::Disk: {
            double cx = 0.5 * (x1 + x2), cy = 0.5 * (y1 + y2);
            double rad = 0.5 * std::min(x2 - x1, y2 - y1);
            for (int r = y1; r < y2; ++r)
                for (int c = x1; c < x2; ++c) {
                    double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
                    if (dx * dx + dy * dy <= rad * rad) paint(r, c);
                }
            break;
        }
        case ShapeClass::Triangle: {
            // Upward triangle, apex centered at the top edge.
            double ax = 0.5 * (x1 + x2);
            for (int r = y1; r < y2; ++r) {
                double t = (r + 0.5 - y1) / std::max(1, y2 - y1);
                double half = 0.5 * t * (x2 - x1);
                for (int c = x1; c < x2; ++c) {
                    double dx = std::abs(c + 0.5 - ax);
                    if (dx <= half) paint(r, c);
                }
            }
            break;
        }
    }
    RenderedShape out;
    out.gt.class_id = static_cast<int>(cls);
    out.gt.box = BBox(cmin, rmin, cmax + 1, rmax + 1);
    return out;
}

}  // namespace detail

// Deterministic generator: identical spec (incl. seed) yields identical data.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticDataset out;
    out.spec = spec;
    out.data.class_names = synthetic_class_names();
    Rng rng(spec.seed);
    const int sz = spec.image_size;
    for (int n = 0; n < spec.num_images; ++n) {
        Image img(sz, sz, 0.0, "synthetic_" + std::to_string(n));
        double base = rng.uniform(0.25, 0.6);
        for (double& v : img.pixels) v = clamp01(base + rng.uniform(-0.06, 0.06));

        GroundTruth gt;
        int nshapes = rng.uniform_int(spec.shapes_min, spec.shapes_max);
        for (int s = 0; s < nshapes; ++s) {
            int side_w = std::max(
                6, static_cast<int>(rng.uniform(spec.size_min, spec.size_max) * sz));
            int side_h = std::max(
                6, static_cast<int>(rng.uniform(spec.size_min, spec.size_max) * sz));
            // A few placement attempts to avoid heavy overlap with prior shapes.
            int x1 = 0, y1 = 0;
            bool ok = false;
            for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
                x1 = rng.uniform_int(1, sz - side_w - 1);
                y1 = rng.uniform_int(1, sz - side_h - 1);
                ok = true;
                for (const auto& prev : gt) {
                    double ix = std::max(0.0, std::min<double>(x1 + side_w, prev.box.x2) -
                                                  std::max<double>(x1, prev.box.x1));
                    double iy = std::max(0.0, std::min<double>(y1 + side_h, prev.box.y2) -
                                                  std::max<double>(y1, prev.box.y1));
                    if (ix * iy > 0.15 * side_w * side_h) ok = false;
                }
            }
            auto cls = static_cast<ShapeClass>(rng.uniform_int(0, 2));
            double rgb[3];
            // Saturated color well separated from the gray-ish background.
            int hot = rng.uniform_int(0, 2);
            for (int ch = 0; ch < 3; ++ch)
                rgb[ch] = ch == hot ? rng.uniform(0.8, 1.0) : rng.uniform(0.0, 0.2);
            auto shape =
                detail::render_shape(img, cls, x1, y1, x1 + side_w, y1 + side_h, rgb);
            gt.push_back(shape.gt);
        }
        out.data.images.push_back(std::move(img));
        out.data.gts.push_back(std::move(gt));
    }
    return out;
}

// Writes the synthetic images as PNGs plus a manifest index.
inline DatasetManifest write_synthetic(const SyntheticDataset& ds,
                                       const std::string& dir,
                                       const std::string& split = "train") {
    fs::create_directories(dir);
    DatasetManifest m;
    m.split = split;
    m.format = "synthetic";
    m.class_names = ds.data.class_names;
    for (size_t i = 0; i < ds.data.images.size(); ++i) {
        const Image& img = ds.data.images[i];
        std::string path = (fs::path(dir) / (img.source_id + ".png")).string();
        write_png(path, img);
        m.entries.push_back({path, img.source_id, ds.data.gts[i]});
    }
    save_manifest(m, (fs::path(dir) / "manifest.json").string());
    return m;
}

// ---------------------------------------------------------------------------
// Annotation format loaders
// ---------------------------------------------------------------------------

namespace detail {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Minimal tag extraction sufficient for VOC-style annotation XML.
inline std::vector<std::string> xml_blocks(const std::string& doc,
                                           const std::string& tag) {
    std::vector<std::string> out;
    std::string open = "<" + tag + ">", close = "</" + tag + ">";
    size_t pos = 0;
    while (true) {
        size_t a = doc.find(open, pos);
        if (a == std::string::npos) break;
        size_t b = doc.find(close, a);
        if (b == std::string::npos)
            throw FormatError("unclosed <" + tag + "> element");
        out.push_back(doc.substr(a + open.size(), b - a - open.size()));
        pos = b + close.size();
    }
    return out;
}

inline std::string xml_text(const std::string& doc, const std::string& tag) {
    auto blocks = xml_blocks(doc, tag);
    if (blocks.empty()) throw FormatError("missing <" + tag + "> element");
    std::string s = blocks.front();
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline int class_index(std::vector<std::string>& names,
                       const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it != names.end()) return static_cast<int>(it - names.begin());
    names.push_back(name);
    return static_cast<int>(names.size()) - 1;
}

inline bool has_extension(const fs::path& p, const char* ext) {
    return p.extension() == ext;
}

}  // namespace detail

inline DatasetManifest load_voc_xml(const std::string& root) {
    DatasetManifest m;
    m.format = "voc-xml";
    m.split = fs::path(root).filename().string();
    std::vector<fs::path> xmls;
    for (const auto& de : fs::recursive_directory_iterator(root))
        if (de.is_regular_file() && detail::has_extension(de.path(), ".xml"))
            xmls.push_back(de.path());
    std::sort(xmls.begin(), xmls.end());

    for (const auto& xml : xmls) {
        try {
            std::string doc = detail::read_file(xml.string());
            std::string filename = detail::xml_text(doc, "filename");
            fs::path img = xml.parent_path() / filename;
            if (!fs::exists(img)) {
                ++m.skipped;
                continue;
            }
            ImageEntry e;
            e.image_path = img.string();
            e.image_id = img.stem().string();
            for (const auto& obj : detail::xml_blocks(doc, "object")) {
                std::string name = detail::xml_text(obj, "name");
                double x1 = std::stod(detail::xml_text(obj, "xmin"));
                double y1 = std::stod(detail::xml_text(obj, "ymin"));
                double x2 = std::stod(detail::xml_text(obj, "xmax"));
                double y2 = std::stod(detail::xml_text(obj, "ymax"));
                e.gt.push_back(
                    {BBox(x1, y1, x2, y2), detail::class_index(m.class_names, name)});
            }
            m.entries.push_back(std::move(e));
        } catch (const FormatError&) {
            throw FormatError("malformed VOC annotation: " + xml.string());
        } catch (const ContractError&) {
            ++m.skipped;
        }
    }
    if (m.entries.empty())
        throw IoError("no valid VOC entries under: " + root);
    return m;
}

inline DatasetManifest load_coco_json(const std::string& root) {
    // Expects annotations.json at the root and images referenced relative to it.
    fs::path ann = fs::path(root) / "annotations.json";
    if (!fs::exists(ann)) throw IoError("missing annotations.json in: " + root);
    nlohmann::json j;
    try {
        std::ifstream in(ann);
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed COCO json " + ann.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.format = "coco-json";
    m.split = fs::path(root).filename().string();
    try {
        std::map<int, int> cat_to_idx;
        for (const auto& cat : j.at("categories")) {
            cat_to_idx[cat.at("id").get<int>()] =
                detail::class_index(m.class_names, cat.at("name").get<std::string>());
        }
        std::map<int, ImageEntry> by_id;
        for (const auto& im : j.at("images")) {
            fs::path p = fs::path(root) / im.at("file_name").get<std::string>();
            if (!fs::exists(p)) {
                ++m.skipped;
                continue;
            }
            ImageEntry e;
            e.image_path = p.string();
            e.image_id = p.stem().string();
            by_id[im.at("id").get<int>()] = std::move(e);
        }
        for (const auto& a : j.at("annotations")) {
            int img_id = a.at("image_id").get<int>();
            auto it = by_id.find(img_id);
            if (it == by_id.end()) continue;
            auto b = a.at("bbox").get<std::vector<double>>();  // x, y, w, h
            if (b.size() != 4) throw FormatError("coco bbox must have 4 values");
            it->second.gt.push_back(
                {BBox(b[0], b[1], b[0] + b[2], b[1] + b[3]),
                 cat_to_idx.at(a.at("category_id").get<int>())});
        }
        for (auto& [id, e] : by_id) m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed COCO json " + ann.string() + ": " + e.what());
    }
    if (m.entries.empty())
        throw IoError("no valid COCO entries under: " + root);
    return m;
}

// Plain layout: *.png images with sidecar *.txt of "class_name x1 y1 x2 y2"
// lines, plus an optional classes.txt fixing the class order.
inline DatasetManifest load_folder_txt(const std::string& root) {
    DatasetManifest m;
    m.format = "folder+txt";
    m.split = fs::path(root).filename().string();

    fs::path classes = fs::path(root) / "classes.txt";
    if (fs::exists(classes)) {
        std::ifstream in(classes);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) m.class_names.push_back(line);
    }

    std::vector<fs::path> pngs;
    for (const auto& de : fs::directory_iterator(root))
        if (de.is_regular_file() && detail::has_extension(de.path(), ".png"))
            pngs.push_back(de.path());
    std::sort(pngs.begin(), pngs.end());

    for (const auto& png : pngs) {
        fs::path txt = png;
        txt.replace_extension(".txt");
        if (!fs::exists(txt)) {
            ++m.skipped;
            continue;
        }
        ImageEntry e;
        e.image_path = png.string();
        e.image_id = png.stem().string();
        std::ifstream in(txt);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ss(line);
            std::string name;
            double x1, y1, x2, y2;
            if (!(ss >> name >> x1 >> y1 >> x2 >> y2))
                throw FormatError("malformed annotation line " +
                                  std::to_string(lineno) + " in " + txt.string());
            e.gt.push_back(
                {BBox(x1, y1, x2, y2), detail::class_index(m.class_names, name)});
        }
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty())
        throw IoError("no valid folder+txt entries under: " + root);
    return m;
}

inline DatasetManifest load_dataset(const std::string& root,
                                    const std::string& format) {
    if (!fs::exists(root)) throw IoError("dataset root does not exist: " + root);
    if (format == "voc-xml") return load_voc_xml(root);
    if (format == "coco-json") return load_coco_json(root);
    if (format == "folder+txt") return load_folder_txt(root);
    throw ConfigError("unknown dataset format: " + format);
}

inline LoadedDataset load_images(const DatasetManifest& m) {
    LoadedDataset d;
    d.class_names = m.class_names;
    for (const auto& e : m.entries) {
        Image img = read_png(e.image_path);
        img.source_id = e.image_id;
        d.images.push_back(std::move(img));
        d.gts.push_back(e.gt);
    }
    return d;
}

}  // namespace advpatch
