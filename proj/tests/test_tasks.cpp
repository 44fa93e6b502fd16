#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mnas/tasks.hpp"
#include "test_util.hpp"

using namespace mnas;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double l2(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("glyph generation is deterministic in its seed") {
    const ClassDataset a = generate_synthetic_glyphs(42, 6, 4, 12);
    const ClassDataset b = generate_synthetic_glyphs(42, 6, 4, 12);
    REQUIRE(a.n_classes() == 6);
    CHECK(a.train_classes == 5);
    CHECK(a.classes == b.classes);
    const ClassDataset c = generate_synthetic_glyphs(43, 6, 4, 12);
    CHECK(a.classes != c.classes);
}

TEST_CASE("within-class samples are closer than cross-class samples") {
    const ClassDataset ds = generate_synthetic_glyphs(7, 10, 10, 16);
    Rng rng(100);
    double within = 0.0, across = 0.0;
    const int draws = 100;
    for (int i = 0; i < draws; ++i) {
        const int c = rng.uniform_int(10);
        int c2 = rng.uniform_int(10);
        while (c2 == c) {
            c2 = rng.uniform_int(10);
        }
        const int a = rng.uniform_int(10);
        int b = rng.uniform_int(10);
        while (b == a) {
            b = rng.uniform_int(10);
        }
        within += l2(ds.classes[c][a], ds.classes[c][b]);
        across += l2(ds.classes[c][a], ds.classes[c2][b]);
    }
    CHECK(within / draws < across / draws);
}

TEST_CASE("generator rejects degenerate requests but allows one class") {
    CHECK_THROWS_AS(generate_synthetic_glyphs(1, 4, 4, 4), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic_glyphs(1, 4, 1, 16), std::invalid_argument);
    const ClassDataset single = generate_synthetic_glyphs(1, 1, 5, 8);
    CHECK(single.n_classes() == 1);
    Rng rng(5);
    CHECK_THROWS_AS(sample_episode(single, Split::MetaTrain, 2, 1, 1, rng),
                    std::invalid_argument);
}

TEST_CASE("fsds files round-trip bytewise") {
    const ClassDataset ds = generate_synthetic_glyphs(11, 5, 3, 8);
    TempFile f1("mnas_rt1.fsds"), f2("mnas_rt2.fsds");
    save_dataset(ds, f1.path);
    const ClassDataset loaded = load_dataset(f1.path);
    CHECK(loaded.height == 8);
    CHECK(loaded.n_classes() == 5);
    save_dataset(loaded, f2.path);
    CHECK(slurp(f1.path) == slurp(f2.path));
}

TEST_CASE("fsds corruption is reported distinctly") {
    const ClassDataset ds = generate_synthetic_glyphs(11, 3, 3, 8);
    TempFile good("mnas_good.fsds");
    save_dataset(ds, good.path);
    auto bytes = slurp(good.path);

    SUBCASE("bad magic") {
        auto bad = bytes;
        bad[0] = 'X';
        TempFile f("mnas_badmagic.fsds");
        std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<long>(bad.size()));
        try {
            load_dataset(f.path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::BadMagic);
        }
    }
    SUBCASE("bad version") {
        auto bad = bytes;
        bad[4] = 9;
        TempFile f("mnas_badver.fsds");
        std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<long>(bad.size()));
        try {
            load_dataset(f.path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::BadVersion);
        }
    }
    SUBCASE("header claims more images than present") {
        auto bad = bytes;
        bad.resize(bytes.size() - 100);
        TempFile f("mnas_trunc.fsds");
        std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<long>(bad.size()));
        try {
            load_dataset(f.path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::Truncated);
        }
    }
    SUBCASE("trailing bytes beyond the declared count") {
        auto bad = bytes;
        bad.push_back('\0');
        TempFile f("mnas_trail.fsds");
        std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<long>(bad.size()));
        try {
            load_dataset(f.path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.kind() == FormatError::Kind::CountMismatch);
        }
    }
}

TEST_CASE("episodes have the right shape and are support/query disjoint") {
    const ClassDataset ds = generate_synthetic_glyphs(3, 25, 20, 8);
    Rng rng(9);
    const Episode ep = sample_episode(ds, Split::MetaTrain, 5, 1, 15, rng);
    CHECK(ep.support_x.shape() == std::vector<int>{5, 1, 8, 8});
    CHECK(ep.query_x.shape() == std::vector<int>{75, 1, 8, 8});
    CHECK(ep.support_y.size() == 5);
    CHECK(ep.query_y.size() == 75);

    // labels cover [0, n_way)
    std::set<int> labels(ep.support_y.begin(), ep.support_y.end());
    CHECK(labels == std::set<int>{0, 1, 2, 3, 4});

    // no support image reappears in the query set
    const size_t pixels = 64;
    std::set<std::vector<double>> support_images;
    for (int i = 0; i < 5; ++i) {
        support_images.insert(std::vector<double>(ep.support_x.data().begin() + i * pixels,
                                                  ep.support_x.data().begin() + (i + 1) * pixels));
    }
    for (int i = 0; i < 75; ++i) {
        std::vector<double> img(ep.query_x.data().begin() + i * pixels,
                                ep.query_x.data().begin() + (i + 1) * pixels);
        CHECK(support_images.count(img) == 0);
    }
}

TEST_CASE("episode sampling is reproducible from the rng state") {
    const ClassDataset ds = generate_synthetic_glyphs(3, 12, 6, 8);
    Rng a(77), b(77);
    const Episode ea = sample_episode(ds, Split::MetaTest, 2, 2, 3, a);
    const Episode eb = sample_episode(ds, Split::MetaTest, 2, 2, 3, b);
    CHECK(ea.support_x.data() == eb.support_x.data());
    CHECK(ea.query_x.data() == eb.query_x.data());
    CHECK(ea.support_y == eb.support_y);
    CHECK(ea.query_y == eb.query_y);
}

TEST_CASE("classes appear in episodes at the expected frequency") {
    // 20 meta-train classes; 5-way episodes should use each class in 25%
    ClassDataset ds = generate_synthetic_glyphs(13, 20, 4, 8);
    ds.train_classes = 20;
    Rng rng(123);
    std::vector<int> seen(20, 0);
    const int episodes = 10000;
    for (int e = 0; e < episodes; ++e) {
        const Episode ep = sample_episode(ds, Split::MetaTrain, 5, 1, 1, rng);
        // recover the classes by matching support images back to the dataset
        for (int i = 0; i < 5; ++i) {
            std::vector<double> img(ep.support_x.data().begin() + i * 64,
                                    ep.support_x.data().begin() + (i + 1) * 64);
            for (int c = 0; c < 20; ++c) {
                for (const auto& ref : ds.classes[c]) {
                    if (ref == img) {
                        ++seen[c];
                    }
                }
            }
        }
    }
    for (int c = 0; c < 20; ++c) {
        const double freq = static_cast<double>(seen[c]) / episodes;
        CHECK(freq > 0.23);
        CHECK(freq < 0.27);
    }
}

TEST_CASE("split class sets are disjoint and split sampling respects them") {
    const ClassDataset ds = generate_synthetic_glyphs(21, 10, 8, 8);
    CHECK(ds.train_classes == 8);
    CHECK(ds.split_size(Split::MetaTrain) == 8);
    CHECK(ds.split_size(Split::MetaTest) == 2);
    CHECK(ds.split_begin(Split::MetaTest) == 8);

    // meta-test episodes draw only from the last two classes
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Episode ep = sample_episode(ds, Split::MetaTest, 2, 1, 2, rng);
        for (int i = 0; i < 2; ++i) {
            std::vector<double> img(ep.support_x.data().begin() + i * 64,
                                    ep.support_x.data().begin() + (i + 1) * 64);
            bool in_test_split = false;
            for (int c = 8; c < 10; ++c) {
                for (const auto& ref : ds.classes[c]) {
                    if (ref == img) {
                        in_test_split = true;
                    }
                }
            }
            CHECK(in_test_split);
        }
    }
    CHECK_THROWS_AS(sample_episode(ds, Split::MetaTest, 3, 1, 2, rng), std::invalid_argument);
}
