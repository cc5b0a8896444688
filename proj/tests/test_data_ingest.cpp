#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "moclseg/data_ingest.hpp"

using namespace moclseg;

namespace {

DatasetManifest fake_manifest(size_t n, int n_injured = 0) {
    DatasetManifest m;
    for (size_t i = 0; i < n; ++i) {
        SampleRecord r;
        r.id = "s" + std::to_string(i);
        r.stratum = static_cast<int>(i) < n_injured ? Stratum::injured : Stratum::normal;
        m.samples.push_back(r);
    }
    return m;
}

std::set<std::string> as_set(const std::vector<std::string>& v) {
    return {v.begin(), v.end()};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) {
        path = fs::temp_directory_path() / ("moclseg_" + name + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_png(const fs::path& p, int h, int w, int value = 128, int channels = 3) {
    fs::create_directories(p.parent_path());
    cv::Mat m(h, w, channels == 3 ? CV_8UC3 : CV_8UC1, cv::Scalar::all(value));
    cv::imwrite(p.string(), m);
}

} // namespace

TEST_CASE("split_dataset size arithmetic: floor per split, remainder to train") {
    auto m10 = fake_manifest(10);
    auto s10 = split_dataset(m10, {6, 1, 3}, 42, false);
    CHECK(s10.train.size() == 6);
    CHECK(s10.val.size() == 1);
    CHECK(s10.test.size() == 3);

    auto m100 = fake_manifest(100);
    auto s100 = split_dataset(m100, {6, 1, 3}, 42, false);
    CHECK(s100.train.size() == 60);
    CHECK(s100.val.size() == 10);
    CHECK(s100.test.size() == 30);

    auto m11 = fake_manifest(11);
    auto s11 = split_dataset(m11, {6, 1, 3}, 42, false);
    CHECK(s11.train.size() == 7); // floor gives 6/1/3, remainder 1 -> train
    CHECK(s11.val.size() == 1);
    CHECK(s11.test.size() == 3);
}

TEST_CASE("split_dataset is a deterministic partition") {
    Rng rng(3);
    for (int t = 0; t < 300; ++t) {
        size_t n = 10 + rng.next_below(90);
        auto m = fake_manifest(n);
        auto s = split_dataset(m, {6, 1, 3}, 100 + static_cast<uint64_t>(t), false);
        std::set<std::string> all;
        for (const auto& id : s.train) CHECK(all.insert(id).second);
        for (const auto& id : s.val) CHECK(all.insert(id).second);
        for (const auto& id : s.test) CHECK(all.insert(id).second);
        CHECK(all.size() == n);

        auto s2 = split_dataset(m, {6, 1, 3}, 100 + static_cast<uint64_t>(t), false);
        CHECK(s2.train == s.train);
        CHECK(s2.val == s.val);
        CHECK(s2.test == s.test);
    }
}

TEST_CASE("stratified split balances strata and validates group sizes") {
    auto m = fake_manifest(40, 20); // 20 injured, 20 normal
    auto s = split_dataset(m, {6, 1, 3}, 7, true);
    auto injured_in = [&](const std::vector<std::string>& ids) {
        int c = 0;
        for (const auto& id : ids) c += m.record(id).stratum == Stratum::injured;
        return c;
    };
    // each split should carry about half injured samples (within 1)
    CHECK(std::abs(injured_in(s.train) - static_cast<int>(s.train.size()) / 2) <= 1);
    CHECK(std::abs(injured_in(s.test) - static_cast<int>(s.test.size()) / 2) <= 1);
    CHECK(s.train.size() + s.val.size() + s.test.size() == 40);

    auto tiny = fake_manifest(10, 2); // injured stratum has only 2 samples
    CHECK_THROWS_AS(split_dataset(tiny, {6, 1, 3}, 7, true), ValidationError);
}

TEST_CASE("split_dataset input validation") {
    auto m = fake_manifest(10);
    CHECK_THROWS_AS(split_dataset(m, {0, 1, 3}, 1, false), ValidationError);
    CHECK_THROWS_AS(split_dataset(fake_manifest(0), {6, 1, 3}, 1, false), ValidationError);
}

TEST_CASE("subsample_training arithmetic and determinism") {
    auto m = fake_manifest(480 + 48 + 144);
    SplitAssignment split;
    for (size_t i = 0; i < 480; ++i) split.train.push_back("t" + std::to_string(i));
    for (size_t i = 0; i < 48; ++i) split.val.push_back("v" + std::to_string(i));
    for (size_t i = 0; i < 144; ++i) split.test.push_back("x" + std::to_string(i));

    SUBCASE("fraction 1.0 is the identity") {
        auto s = subsample_training(split, 1.0, 42);
        CHECK(s.train == split.train);
    }
    SUBCASE("4% of 480 keeps 19, 0.5% keeps 2") {
        CHECK(subsample_training(split, 0.04, 42).train.size() == 19);
        CHECK(subsample_training(split, 0.005, 42).train.size() == 2);
    }
    SUBCASE("at least one unit always survives") {
        CHECK(subsample_training(split, 1e-6, 42).train.size() == 1);
    }
    SUBCASE("val and test are untouched; result is a subset of train") {
        auto s = subsample_training(split, 0.04, 42);
        CHECK(s.val == split.val);
        CHECK(s.test == split.test);
        auto full = as_set(split.train);
        for (const auto& id : s.train) CHECK(full.count(id) == 1);
    }
    SUBCASE("deterministic per seed, different across seeds") {
        auto a = subsample_training(split, 0.04, 42);
        auto b = subsample_training(split, 0.04, 42);
        auto c = subsample_training(split, 0.04, 43);
        CHECK(a.train == b.train);
        CHECK(a.train != c.train);
    }
    SUBCASE("invalid fraction and empty training set raise") {
        CHECK_THROWS_AS(subsample_training(split, 0.0, 42), ValidationError);
        CHECK_THROWS_AS(subsample_training(split, 1.5, 42), ValidationError);
        SplitAssignment empty;
        CHECK_THROWS_AS(subsample_training(empty, 0.5, 42), ValidationError);
    }
}

TEST_CASE("derive_mask_from_if thresholding") {
    cv::Mat img(4, 4, CV_8UC1, cv::Scalar(100));

    SUBCASE("all below threshold gives empty mask") {
        cv::Mat m = derive_mask_from_if(img, 128, 0);
        CHECK(cv::countNonZero(m) == 0);
    }
    SUBCASE("all at or above threshold with min_size 0 gives full mask") {
        cv::Mat m = derive_mask_from_if(img, 100, 0);
        CHECK(cv::countNonZero(m) == 16);
        CHECK(m.type() == CV_8UC1);
        double mx;
        cv::minMaxLoc(m, nullptr, &mx);
        CHECK(mx == 1.0);
    }
    SUBCASE("3-pixel blob survives min_size 2, isolated pixel removed") {
        cv::Mat a = cv::Mat::zeros(4, 4, CV_8UC1);
        a.at<uint8_t>(1, 1) = 200;
        a.at<uint8_t>(1, 2) = 200;
        a.at<uint8_t>(2, 1) = 200;
        a.at<uint8_t>(3, 3) = 200; // 1-px blob
        cv::Mat m = derive_mask_from_if(a, 128, 2);
        CHECK(m.at<uint8_t>(1, 1) == 1);
        CHECK(m.at<uint8_t>(1, 2) == 1);
        CHECK(m.at<uint8_t>(2, 1) == 1);
        CHECK(m.at<uint8_t>(3, 3) == 0);
        CHECK(cv::countNonZero(m) == 3);
    }
    SUBCASE("raising the threshold never adds pixels") {
        Rng rng(5);
        cv::Mat noise(16, 16, CV_8UC1);
        for (int i = 0; i < 256; ++i)
            noise.at<uint8_t>(i / 16, i % 16) = static_cast<uint8_t>(rng.next_below(256));
        cv::Mat prev = derive_mask_from_if(noise, 0, 0);
        for (int t = 16; t <= 256; t += 16) {
            cv::Mat cur = derive_mask_from_if(noise, t, 0);
            for (int i = 0; i < 256; ++i)
                if (cur.at<uint8_t>(i / 16, i % 16))
                    CHECK(prev.at<uint8_t>(i / 16, i % 16) == 1);
            prev = cur;
        }
    }
}

TEST_CASE("boxes_from_mask tight and random modes") {
    SUBCASE("single 3x5 rectangle yields its exact tight box") {
        cv::Mat m = cv::Mat::zeros(10, 12, CV_32S);
        m(cv::Rect(4, 2, 5, 3)).setTo(1); // x0=4,y0=2,w=5,h=3
        auto boxes = boxes_from_mask(m, BoxSource::tight, 0.0, 42, "cell");
        REQUIRE(boxes.size() == 1);
        CHECK(boxes[0].x0 == 4);
        CHECK(boxes[0].y0 == 2);
        CHECK(boxes[0].x1 == 9);
        CHECK(boxes[0].y1 == 5);
        CHECK(boxes[0].source == BoxSource::tight);
        CHECK(boxes[0].class_name == "cell");
    }
    SUBCASE("empty mask gives no boxes") {
        cv::Mat m = cv::Mat::zeros(8, 8, CV_32S);
        CHECK(boxes_from_mask(m, BoxSource::tight, 0.0, 42).empty());
    }
    SUBCASE("random mode requires positive jitter") {
        cv::Mat m = cv::Mat::zeros(8, 8, CV_32S);
        CHECK_THROWS_AS(boxes_from_mask(m, BoxSource::random, 0.0, 42), ValidationError);
    }
    SUBCASE("tight boxes contain their instance minimally; random boxes stay near") {
        Rng rng(9);
        for (int t = 0; t < 100; ++t) {
            int h = 20, w = 20;
            cv::Mat m = cv::Mat::zeros(h, w, CV_32S);
            int n = 1 + static_cast<int>(rng.next_below(3));
            for (int i = 0; i < n; ++i) {
                int x0 = static_cast<int>(rng.next_below(12));
                int y0 = static_cast<int>(rng.next_below(12));
                int bw = 3 + static_cast<int>(rng.next_below(6));
                int bh = 3 + static_cast<int>(rng.next_below(6));
                m(cv::Rect(x0, y0, std::min(bw, w - x0), std::min(bh, h - y0))).setTo(i + 1);
            }
            auto tight = boxes_from_mask(m, BoxSource::tight, 0.0, 42);
            for (const auto& b : tight) {
                CHECK(b.x0 >= 0);
                CHECK(b.y0 >= 0);
                CHECK(b.x1 <= w);
                CHECK(b.y1 <= h);
                CHECK(b.width() > 0);
                CHECK(b.height() > 0);
            }
            // per-label containment and minimality via a direct extent oracle
            std::map<int, std::array<int, 4>> oracle;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    int lb = m.at<int>(y, x);
                    if (lb <= 0) continue;
                    auto it = oracle.find(lb);
                    if (it == oracle.end())
                        oracle[lb] = {x, y, x + 1, y + 1};
                    else {
                        it->second[0] = std::min(it->second[0], x);
                        it->second[1] = std::min(it->second[1], y);
                        it->second[2] = std::max(it->second[2], x + 1);
                        it->second[3] = std::max(it->second[3], y + 1);
                    }
                }
            REQUIRE(tight.size() == oracle.size());
            size_t bi = 0;
            for (const auto& [lb, e] : oracle) {
                CHECK(tight[bi].x0 == e[0]);
                CHECK(tight[bi].y0 == e[1]);
                CHECK(tight[bi].x1 == e[2]);
                CHECK(tight[bi].y1 == e[3]);
                ++bi;
            }

            auto rnd = boxes_from_mask(m, BoxSource::random, 0.1, 42 + static_cast<uint64_t>(t));
            REQUIRE(rnd.size() == tight.size());
            for (size_t i = 0; i < rnd.size(); ++i) {
                // each random edge within 10% of the tight side length (+1 for rounding)
                double dx = 0.1 * tight[i].width() + 1.0;
                double dy = 0.1 * tight[i].height() + 1.0;
                CHECK(std::abs(rnd[i].x0 - tight[i].x0) <= dx);
                CHECK(std::abs(rnd[i].x1 - tight[i].x1) <= dx);
                CHECK(std::abs(rnd[i].y0 - tight[i].y0) <= dy);
                CHECK(std::abs(rnd[i].y1 - tight[i].y1) <= dy);
                CHECK(rnd[i].x0 >= 0);
                CHECK(rnd[i].y0 >= 0);
                CHECK(rnd[i].x1 <= w);
                CHECK(rnd[i].y1 <= h);
                CHECK(rnd[i].x0 < rnd[i].x1);
                CHECK(rnd[i].y0 < rnd[i].y1);
            }
            // determinism
            auto rnd2 = boxes_from_mask(m, BoxSource::random, 0.1, 42 + static_cast<uint64_t>(t));
            for (size_t i = 0; i < rnd.size(); ++i) {
                CHECK(rnd[i].x0 == rnd2[i].x0);
                CHECK(rnd[i].y1 == rnd2[i].y1);
            }
        }
    }
}

TEST_CASE("tile_image edge-anchored coverage") {
    SUBCASE("1000x1000, tile 250, stride 250 gives a 4x4 grid") {
        auto tiles = tile_image(1000, 1000, 250, 250);
        CHECK(tiles.size() == 16);
    }
    SUBCASE("512x512, tile 512 gives one tile at the origin") {
        auto tiles = tile_image(512, 512, 512, 512);
        REQUIRE(tiles.size() == 1);
        CHECK(tiles[0].x == 0);
        CHECK(tiles[0].y == 0);
    }
    SUBCASE("600x600, tile 512, stride 512 anchors at {0,88} in both axes") {
        auto tiles = tile_image(600, 600, 512, 512);
        REQUIRE(tiles.size() == 4);
        std::set<std::pair<int, int>> got;
        for (const auto& t : tiles) got.insert({t.x, t.y});
        std::set<std::pair<int, int>> want{{0, 0}, {88, 0}, {0, 88}, {88, 88}};
        CHECK(got == want);
    }
    SUBCASE("tiles jointly cover every pixel") {
        Rng rng(11);
        for (int t = 0; t < 50; ++t) {
            int h = 40 + static_cast<int>(rng.next_below(100));
            int w = 40 + static_cast<int>(rng.next_below(100));
            int tile = 16 + static_cast<int>(rng.next_below(24));
            int stride = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(tile)));
            auto tiles = tile_image(h, w, tile, stride);
            cv::Mat cover = cv::Mat::zeros(h, w, CV_8UC1);
            for (const auto& tc : tiles) {
                CHECK(tc.x >= 0);
                CHECK(tc.y >= 0);
                CHECK(tc.x + tile <= w);
                CHECK(tc.y + tile <= h);
                cover(cv::Rect(tc.x, tc.y, tile, tile)).setTo(1);
            }
            CHECK(cv::countNonZero(cover) == h * w);
        }
    }
    SUBCASE("tile larger than the image is an error") {
        CHECK_THROWS_AS(tile_image(100, 100, 128, 64), ValidationError);
    }
}

TEST_CASE("box JSONL and mask PNG round trips") {
    TempDir dir("io");
    SUBCASE("boxes round-trip through JSONL") {
        std::vector<BoxAnnotation> boxes{{"podocyte", 1, 2, 5, 9, BoxSource::tight},
                                         {"mesangial", 0, 0, 3, 3, BoxSource::random}};
        write_boxes_jsonl(dir.path / "b.jsonl", boxes);
        auto back = read_boxes_jsonl(dir.path / "b.jsonl");
        REQUIRE(back.size() == 2);
        CHECK(back[0].class_name == "podocyte");
        CHECK(back[0].x0 == 1);
        CHECK(back[0].y1 == 9);
        CHECK(back[0].source == BoxSource::tight);
        CHECK(back[1].source == BoxSource::random);
    }
    SUBCASE("degenerate stored box is rejected on read") {
        std::ofstream out(dir.path / "bad.jsonl");
        out << R"({"class":"c","bbox":[5,5,5,9],"source":"tight"})" << "\n";
        out.close();
        CHECK_THROWS_AS(read_boxes_jsonl(dir.path / "bad.jsonl"), ValidationError);
    }
    SUBCASE("masks round-trip as {0,1} via {0,255} PNGs") {
        cv::Mat m = cv::Mat::zeros(6, 6, CV_8UC1);
        m(cv::Rect(1, 1, 3, 2)).setTo(1);
        write_mask_png(dir.path / "m.png", m);
        cv::Mat back = read_mask_png(dir.path / "m.png");
        CHECK(cv::countNonZero(back != m) == 0);
        double mx;
        cv::minMaxLoc(back, nullptr, &mx);
        CHECK(mx == 1.0);
    }
    SUBCASE("instance maps round-trip through 16-bit PNGs") {
        cv::Mat lab = cv::Mat::zeros(5, 5, CV_32S);
        lab.at<int>(0, 0) = 1;
        lab.at<int>(4, 4) = 300;
        write_instance_png16(dir.path / "i.png", lab);
        cv::Mat back = read_instance_png16(dir.path / "i.png");
        CHECK(back.type() == CV_32S);
        CHECK(cv::countNonZero(back != lab) == 0);
        cv::Mat big = cv::Mat::zeros(2, 2, CV_32S);
        big.at<int>(0, 0) = 70000;
        CHECK_THROWS_AS(write_instance_png16(dir.path / "big.png", big), ValidationError);
    }
}

TEST_CASE("load_manifest validation") {
    TempDir dir("manifest");
    auto write_manifest = [&](const std::string& body) {
        std::ofstream out(dir.path / "manifest.json");
        out << body;
    };
    write_png(dir.path / "images" / "a.png", 8, 8);
    write_png(dir.path / "images" / "b.png", 8, 8);
    write_png(dir.path / "images" / "c.png", 8, 8);
    write_png(dir.path / "masks" / "pod" / "a.png", 8, 8, 255, 1);

    SUBCASE("valid 3-sample manifest loads 3 records") {
        write_manifest(R"({"samples":[
            {"id":"a","image_path":"images/a.png","mask_paths":{"pod":"masks/pod/a.png"}},
            {"id":"b","image_path":"images/b.png"},
            {"id":"c","image_path":"images/c.png"}]})");
        auto m = load_manifest(dir.path, dir.path / "manifest.json");
        CHECK(m.samples.size() == 3);
        CHECK(m.class_names == std::vector<std::string>{"pod"});
        CHECK(m.record("b").id == "b");
        CHECK_THROWS_AS(m.record("zz"), ValidationError);
    }
    SUBCASE("missing mask file is a validation error") {
        write_manifest(R"({"samples":[
            {"id":"a","image_path":"images/a.png","mask_paths":{"pod":"masks/pod/missing.png"}}]})");
        CHECK_THROWS_AS(load_manifest(dir.path, dir.path / "manifest.json"), ValidationError);
    }
    SUBCASE("duplicate sample id is a validation error") {
        write_manifest(R"({"samples":[
            {"id":"a","image_path":"images/a.png"},
            {"id":"a","image_path":"images/b.png"}]})");
        CHECK_THROWS_AS(load_manifest(dir.path, dir.path / "manifest.json"), ValidationError);
    }
    SUBCASE("shape mismatch names the sample") {
        write_png(dir.path / "masks" / "pod" / "small.png", 4, 4, 255, 1);
        write_manifest(R"({"samples":[
            {"id":"a","image_path":"images/a.png","mask_paths":{"pod":"masks/pod/small.png"}}]})");
        try {
            load_manifest(dir.path, dir.path / "manifest.json");
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("'a'") != std::string::npos);
        }
    }
    SUBCASE("absent manifest file is an I/O error") {
        CHECK_THROWS_AS(load_manifest(dir.path, dir.path / "nope.json"), IoError);
    }
    SUBCASE("malformed JSON is a validation error") {
        write_manifest("{not json");
        CHECK_THROWS_AS(load_manifest(dir.path, dir.path / "manifest.json"), ValidationError);
    }
}
