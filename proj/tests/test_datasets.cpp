#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "advpatch/datasets.hpp"

using namespace advpatch;
namespace fs = std::filesystem;

namespace {
fs::path fresh_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / "advpatch_ds_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("synthetic generation is deterministic") {
    SyntheticSpec spec;
    spec.num_images = 10;
    spec.seed = 3;
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    REQUIRE(a.data.size() == 10);
    for (size_t i = 0; i < a.data.size(); ++i) {
        REQUIRE(a.data.images[i].pixels == b.data.images[i].pixels);
        REQUIRE(a.data.gts[i].size() == b.data.gts[i].size());
        for (size_t g = 0; g < a.data.gts[i].size(); ++g) {
            REQUIRE(a.data.gts[i][g].class_id == b.data.gts[i][g].class_id);
            REQUIRE(a.data.gts[i][g].box.x1 == b.data.gts[i][g].box.x1);
        }
    }
}

TEST_CASE("shapes-per-image (1,1) yields exactly one GT box") {
    SyntheticSpec spec;
    spec.num_images = 20;
    spec.shapes_min = 1;
    spec.shapes_max = 1;
    spec.seed = 5;
    auto ds = generate_synthetic(spec);
    for (const auto& gt : ds.data.gts) REQUIRE(gt.size() == 1);
}

TEST_CASE("GT boxes tightly bound non-background pixels") {
    SyntheticSpec spec;
    spec.num_images = 15;
    spec.shapes_min = 1;
    spec.shapes_max = 1;
    spec.seed = 11;
    auto ds = generate_synthetic(spec);
    for (size_t i = 0; i < ds.data.size(); ++i) {
        const Image& img = ds.data.images[i];
        const BBox& box = ds.data.gts[i][0].box;
        // Pixel-scan: shapes are saturated (one channel >= 0.8), background
        // is mid-gray noise, so scan for extreme pixels.
        int rmin = img.height, rmax = -1, cmin = img.width, cmax = -1;
        for (int r = 0; r < img.height; ++r)
            for (int c = 0; c < img.width; ++c) {
                double mx = std::max({img.at(r, c, 0), img.at(r, c, 1),
                                      img.at(r, c, 2)});
                double mn = std::min({img.at(r, c, 0), img.at(r, c, 1),
                                      img.at(r, c, 2)});
                if (mx >= 0.75 && mn <= 0.25) {
                    rmin = std::min(rmin, r);
                    rmax = std::max(rmax, r);
                    cmin = std::min(cmin, c);
                    cmax = std::max(cmax, c);
                }
            }
        REQUIRE(rmax >= 0);
        REQUIRE(std::abs(box.y1 - rmin) <= 1.0);
        REQUIRE(std::abs(box.x1 - cmin) <= 1.0);
        REQUIRE(std::abs(box.y2 - (rmax + 1)) <= 1.0);
        REQUIRE(std::abs(box.x2 - (cmax + 1)) <= 1.0);
        // Always inside image bounds.
        REQUIRE(box.x1 >= 0);
        REQUIRE(box.y1 >= 0);
        REQUIRE(box.x2 <= img.width);
        REQUIRE(box.y2 <= img.height);
    }
}

TEST_CASE("synthetic class distribution is roughly uniform") {
    SyntheticSpec spec;
    spec.num_images = 500;
    spec.shapes_min = 2;
    spec.shapes_max = 2;
    spec.seed = 77;
    auto ds = generate_synthetic(spec);
    int counts[3] = {0, 0, 0};
    int total = 0;
    for (const auto& gt : ds.data.gts)
        for (const auto& g : gt) {
            ++counts[g.class_id];
            ++total;
        }
    REQUIRE(total == 1000);
    // Chi-square against uniform with 2 dof; reject only below p ~ 0.001
    // (critical value 13.8).
    double expected = total / 3.0;
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    REQUIRE(chi2 < 13.8);
}

TEST_CASE("manifest round-trip") {
    SyntheticSpec spec;
    spec.num_images = 3;
    spec.seed = 9;
    auto ds = generate_synthetic(spec);
    auto dir = fresh_dir("manifest_rt");
    auto manifest = write_synthetic(ds, dir.string(), "train");
    auto reloaded = load_manifest((dir / "manifest.json").string());
    REQUIRE(reloaded.entries.size() == manifest.entries.size());
    REQUIRE(reloaded.class_names == manifest.class_names);
    for (size_t i = 0; i < manifest.entries.size(); ++i) {
        REQUIRE(reloaded.entries[i].image_path == manifest.entries[i].image_path);
        REQUIRE(reloaded.entries[i].gt.size() == manifest.entries[i].gt.size());
    }
    auto loaded = load_images(reloaded);
    REQUIRE(loaded.size() == 3);
    // PNG quantization only.
    for (size_t i = 0; i < loaded.size(); ++i)
        for (size_t k = 0; k < loaded.images[i].pixels.size(); ++k)
            REQUIRE(std::abs(loaded.images[i].pixels[k] -
                             ds.data.images[i].pixels[k]) <= 1.0 / 510.0);
}

TEST_CASE("voc-xml loader on a hand-authored fixture") {
    auto dir = fresh_dir("voc");
    SyntheticSpec spec;
    spec.num_images = 3;
    spec.seed = 2;
    auto ds = generate_synthetic(spec);
    for (int i = 0; i < 3; ++i) {
        std::string img_name = "img" + std::to_string(i) + ".png";
        write_png((dir / img_name).string(), ds.data.images[static_cast<size_t>(i)]);
        std::ofstream xml(dir / ("img" + std::to_string(i) + ".xml"));
        xml << "<annotation><filename>" << img_name << "</filename>"
            << "<object><name>disk</name><bndbox>"
            << "<xmin>10</xmin><ymin>12</ymin><xmax>30</xmax><ymax>40</ymax>"
            << "</bndbox></object></annotation>";
    }
    auto m = load_dataset(dir.string(), "voc-xml");
    REQUIRE(m.entries.size() == 3);
    REQUIRE(m.class_names == std::vector<std::string>{"disk"});
    REQUIRE(m.entries[0].gt.size() == 1);
    REQUIRE(m.entries[0].gt[0].box.x1 == 10.0);
    REQUIRE(m.entries[0].gt[0].box.y2 == 40.0);
}

TEST_CASE("voc annotation referencing missing image is skipped") {
    auto dir = fresh_dir("voc_skip");
    SyntheticSpec spec;
    spec.num_images = 1;
    spec.seed = 2;
    auto ds = generate_synthetic(spec);
    write_png((dir / "a.png").string(), ds.data.images[0]);
    auto write_xml = [&](const std::string& stem, const std::string& img) {
        std::ofstream xml(dir / (stem + ".xml"));
        xml << "<annotation><filename>" << img << "</filename>"
            << "<object><name>disk</name><bndbox>"
            << "<xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax>"
            << "</bndbox></object></annotation>";
    };
    write_xml("a", "a.png");
    write_xml("b", "missing.png");
    auto m = load_dataset(dir.string(), "voc-xml");
    REQUIRE(m.entries.size() == 1);
    REQUIRE(m.skipped == 1);
}

TEST_CASE("coco-json loader on a hand-authored fixture") {
    auto dir = fresh_dir("coco");
    SyntheticSpec spec;
    spec.num_images = 3;
    spec.seed = 4;
    auto ds = generate_synthetic(spec);
    nlohmann::json j;
    j["categories"] = {{{"id", 7}, {"name", "disk"}}};
    j["images"] = nlohmann::json::array();
    j["annotations"] = nlohmann::json::array();
    for (int i = 0; i < 3; ++i) {
        std::string name = "img" + std::to_string(i) + ".png";
        write_png((dir / name).string(), ds.data.images[static_cast<size_t>(i)]);
        j["images"].push_back({{"id", i}, {"file_name", name}});
        j["annotations"].push_back({{"image_id", i},
                                    {"category_id", 7},
                                    {"bbox", {5.0, 6.0, 10.0, 12.0}}});
    }
    std::ofstream(dir / "annotations.json") << j.dump();
    auto m = load_dataset(dir.string(), "coco-json");
    REQUIRE(m.entries.size() == 3);
    REQUIRE(m.entries[0].gt.size() == 1);
    REQUIRE(m.entries[0].gt[0].box.x2 == 15.0);
    REQUIRE(m.entries[0].gt[0].box.y2 == 18.0);
}

TEST_CASE("folder+txt loader on a hand-authored fixture") {
    auto dir = fresh_dir("foldertxt");
    SyntheticSpec spec;
    spec.num_images = 3;
    spec.seed = 6;
    auto ds = generate_synthetic(spec);
    std::ofstream(dir / "classes.txt") << "rectangle\ndisk\ntriangle\n";
    for (int i = 0; i < 3; ++i) {
        std::string stem = "img" + std::to_string(i);
        write_png((dir / (stem + ".png")).string(),
                  ds.data.images[static_cast<size_t>(i)]);
        std::ofstream(dir / (stem + ".txt")) << "disk 3 4 13 24\n";
    }
    auto m = load_dataset(dir.string(), "folder+txt");
    REQUIRE(m.entries.size() == 3);
    REQUIRE(m.class_names.size() == 3);
    REQUIRE(m.entries[0].gt[0].class_id == 1);
}

TEST_CASE("empty directory is a load error") {
    auto dir = fresh_dir("empty");
    REQUIRE_THROWS_AS(load_dataset(dir.string(), "voc-xml"), IoError);
    REQUIRE_THROWS_AS(load_dataset(dir.string(), "folder+txt"), IoError);
}

TEST_CASE("malformed annotation is a parse error naming the file") {
    auto dir = fresh_dir("badxml");
    SyntheticSpec spec;
    spec.num_images = 1;
    spec.seed = 2;
    auto ds = generate_synthetic(spec);
    write_png((dir / "a.png").string(), ds.data.images[0]);
    std::ofstream(dir / "a.xml")
        << "<annotation><filename>a.png</filename><object><name>disk";
    try {
        load_dataset(dir.string(), "voc-xml");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("a.xml") != std::string::npos);
    }
}
