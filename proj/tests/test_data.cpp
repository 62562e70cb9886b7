#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "d2ssl/data.hpp"
#include "d2ssl/errors.hpp"
#include "test_support.hpp"

using namespace d2ssl;

namespace {

GaussianSpec four_blobs(std::size_t per_class, double spread) {
    GaussianSpec spec;
    spec.centers = default_centers(4, 2, 3.0);
    spec.spread = spread;
    spec.per_class.assign(4, per_class);
    return spec;
}

std::size_t count_class(const SplitDataset& d, Role role, int cls) {
    std::size_t n = 0;
    for (const auto& s : d.samples()) {
        n += (s.role == role && s.true_class == cls) ? 1 : 0;
    }
    return n;
}

// Four 2x3 images with labels 3, 0, 9, 1.
struct IdxFixture {
    std::vector<std::uint8_t> pixels;
    std::vector<std::uint8_t> labels{3, 0, 9, 1};
    IdxFixture() {
        for (int i = 0; i < 4 * 6; ++i) {
            pixels.push_back(static_cast<std::uint8_t>((i * 37) % 256));
        }
        pixels[0] = 0;
        pixels[1] = 255;
    }
};

void write_bytes(const std::filesystem::path& p, const std::vector<char>& bytes) {
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("default centers sit at (+-3, +-3)") {
    const auto c = default_centers(4, 2, 3.0);
    REQUIRE(c.size() == 4);
    for (const auto& v : c) {
        CHECK(std::abs(v[0]) == 3.0);
        CHECK(std::abs(v[1]) == 3.0);
    }
    CHECK(default_centers(6, 3, 1.0).size() == 6);
}

TEST_CASE("zero spread puts every point on its center") {
    Rng rng(1);
    const auto spec = four_blobs(10, 0.0);
    const auto d = gen_gaussians(spec, rng);
    CHECK(d.size() == 40);
    for (const auto& s : d.samples()) {
        CHECK(s.features == spec.centers[static_cast<std::size_t>(s.true_class)]);
    }
}

TEST_CASE("generators are seed deterministic") {
    Rng a(3), b(3), c(4);
    const auto spec = four_blobs(50, 1.0);
    const auto da = gen_gaussians(spec, a);
    CHECK(da == gen_gaussians(spec, b));
    CHECK_FALSE(da == gen_gaussians(spec, c));
    Rng m1(8), m2(8);
    CHECK(gen_two_moons(100, 0.1, m1) == gen_two_moons(100, 0.1, m2));
}

TEST_CASE("noise-free moons lie on their arcs and are balanced") {
    Rng rng(5);
    const auto d = gen_two_moons(200, 0.0, rng);
    CHECK(count_class(d, Role::Unlabeled, 0) == 200);
    CHECK(count_class(d, Role::Unlabeled, 1) == 200);
    for (const auto& s : d.samples()) {
        const double x = s.features[0], y = s.features[1];
        if (s.true_class == 0) {
            CHECK(x * x + y * y == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(y >= 0.0);
        } else {
            CHECK((1.0 - x) * (1.0 - x) + (0.5 - y) * (0.5 - y) == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(y <= 0.5);
        }
    }
}

TEST_CASE("split draws exact labeled counts") {
    SUBCASE("100 per class on ten classes") {
        Rng rng(7);
        GaussianSpec spec;
        spec.num_classes = 10;
        spec.dim = 2;
        spec.centers = default_centers(10, 2, 3.0);
        spec.per_class.assign(10, 300);
        const auto pool = gen_gaussians(spec, rng);
        const auto d = split(pool, 100, 0.2, rng);
        CHECK(d.count(Role::Labeled) == 1000);
        CHECK(d.count(Role::Test) == 600);
        CHECK(d.count(Role::Unlabeled) == 1400);
        for (int c = 0; c < 10; ++c) {
            CHECK(count_class(d, Role::Labeled, c) == 100);
        }
    }
    SUBCASE("labeling every training sample empties the unlabeled pool") {
        Rng rng(7);
        const auto pool = gen_gaussians(four_blobs(20, 1.0), rng);
        const auto d = split(pool, 20, 0.0, rng);
        CHECK(d.count(Role::Unlabeled) == 0);
        CHECK(d.count(Role::Labeled) == 80);
    }
    SUBCASE("too few samples is a configuration error") {
        Rng rng(7);
        const auto pool = gen_gaussians(four_blobs(5, 1.0), rng);
        CHECK_THROWS_AS(split(pool, 6, 0.0, rng), ConfigError);
        CHECK_THROWS_AS(split(pool, 1, 1.0, rng), ConfigError);
    }
    SUBCASE("same seed gives the same split") {
        Rng g(9);
        const auto pool = gen_gaussians(four_blobs(30, 1.0), g);
        Rng r1(10), r2(10);
        CHECK(split(pool, 5, 0.25, r1) == split(pool, 5, 0.25, r2));
    }
    SUBCASE("explicit test set is appended") {
        Rng rng(11);
        const auto pool = gen_gaussians(four_blobs(30, 1.0), rng);
        const auto test = gen_gaussians(four_blobs(10, 1.0), rng);
        const auto d = split(pool, 5, test, rng);
        CHECK(d.size() == 160);
        CHECK(d.count(Role::Test) == 40);
        CHECK(d.count(Role::Labeled) == 20);
        for (std::uint64_t id = 0; id < d.size(); ++id) {
            CHECK(d.sample(id).id == id);
        }
    }
}

TEST_CASE("training view hides unlabeled classes") {
    const auto d = d2ssl::testing::small_blobs(1, 2, 3, 1);
    const auto view = d.training_view();
    CHECK(view.labeled_ids().size() == 8);
    CHECK(view.unlabeled_ids().size() == 12);
    for (auto id : view.labeled_ids()) {
        CHECK(view.label(id) == d.sample(id).true_class);
    }
    CHECK_THROWS_AS(view.label(view.unlabeled_ids().front()), std::logic_error);
}

TEST_CASE("unbalance subsamples the unlabeled pool") {
    const auto d = d2ssl::testing::small_blobs(2, 2, 50, 5);
    Rng rng(3);
    SUBCASE("equal counts stay balanced") {
        const std::vector<std::size_t> keep{20, 20, 20, 20};
        const auto u = unbalance(d, keep, rng);
        for (int c = 0; c < 4; ++c) {
            CHECK(count_class(u, Role::Unlabeled, c) == 20);
            CHECK(count_class(u, Role::Labeled, c) == 2);
            CHECK(count_class(u, Role::Test, c) == 5);
        }
    }
    SUBCASE("a zero count removes the class") {
        const std::vector<std::size_t> keep{50, 0, 10, 50};
        const auto u = unbalance(d, keep, rng);
        CHECK(count_class(u, Role::Unlabeled, 1) == 0);
        CHECK(count_class(u, Role::Unlabeled, 2) == 10);
    }
    SUBCASE("asking for more than exists is an error") {
        const std::vector<std::size_t> keep{51, 0, 0, 0};
        CHECK_THROWS_AS(unbalance(d, keep, rng), ConfigError);
    }
}

TEST_CASE("reference unbalanced class counts total 23000") {
    const std::vector<std::size_t> counts{2770, 3452, 2042, 4062, 4047, 758, 590, 2588, 2201, 490};
    CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == 23000);
}

TEST_CASE("out-of-distribution injection") {
    const auto d = d2ssl::testing::small_blobs(4, 2, 10, 5);
    Rng rng(5);
    GaussianSpec src;
    src.num_classes = 1;
    src.centers = {{0.0, 0.0}};
    src.per_class = {30};
    const auto source = gen_gaussians(src, rng);
    CHECK(inject_ood(d, source, 0, rng) == d);
    const auto o = inject_ood(d, source, 12, rng);
    CHECK(o.count(Role::Unlabeled) == d.count(Role::Unlabeled) + 12);
    CHECK(o.count(Role::Labeled) == d.count(Role::Labeled));
    std::size_t ood = 0;
    for (const auto& s : o.samples()) {
        ood += s.true_class == kOodClass ? 1 : 0;
    }
    CHECK(ood == 12);
    CHECK_THROWS_AS(inject_ood(d, source, 31, rng), ConfigError);
}

TEST_CASE("dataset csv round trip") {
    auto d = d2ssl::testing::small_blobs(6, 2, 4, 3);
    Rng rng(1);
    GaussianSpec src;
    src.num_classes = 1;
    src.centers = {{0.1, 0.2}};
    src.per_class = {3};
    d = inject_ood(d, gen_gaussians(src, rng), 3, rng);
    CHECK(decode_dataset_csv(encode_dataset_csv(d)) == d);
    const auto path = std::filesystem::temp_directory_path() / "d2ssl_data_test.csv";
    save_dataset_csv(d, path);
    CHECK(load_dataset_csv(path) == d);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(decode_dataset_csv("id,role,class\n"), FormatError);
}

TEST_CASE("IDX fixture round trips exactly") {
    const IdxFixture fx;
    const auto images = encode_idx_images(fx.pixels, 4, 2, 3);
    const auto labels = encode_idx_labels(fx.labels);
    CHECK(images.size() == 16 + 24);
    CHECK(labels.size() == 8 + 4);
    const auto d = decode_idx(images, labels);
    CHECK(d.size() == 4);
    CHECK(d.dim() == 6);
    CHECK(d.num_classes() == 10);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(d.sample(i).true_class == fx.labels[i]);
        for (std::size_t p = 0; p < 6; ++p) {
            CHECK(d.sample(i).features[p] == static_cast<double>(fx.pixels[i * 6 + p]) / 255.0);
            CHECK(static_cast<std::uint8_t>(std::lround(d.sample(i).features[p] * 255.0)) == fx.pixels[i * 6 + p]);
        }
    }

    const auto dir = std::filesystem::temp_directory_path();
    write_bytes(dir / "d2ssl_fx-images.idx3", images);
    write_bytes(dir / "d2ssl_fx-labels.idx1", labels);
    const auto loaded = load_idx(dir / "d2ssl_fx-images.idx3", dir / "d2ssl_fx-labels.idx1");
    CHECK(loaded.samples().size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(loaded.sample(i) == d.sample(i));
    }
}

TEST_CASE("IDX header is read big-endian") {
    const IdxFixture fx;
    const auto images = encode_idx_images(fx.pixels, 4, 2, 3);
    CHECK(static_cast<unsigned char>(images[2]) == 0x08);
    CHECK(static_cast<unsigned char>(images[3]) == 0x03);
    CHECK(static_cast<unsigned char>(images[7]) == 4);
}

TEST_CASE("malformed IDX input raises format errors") {
    const IdxFixture fx;
    const auto images = encode_idx_images(fx.pixels, 4, 2, 3);
    const auto labels = encode_idx_labels(fx.labels);
    SUBCASE("labels with the image magic") {
        CHECK_THROWS_AS(decode_idx(images, images), FormatError);
    }
    SUBCASE("images with the label magic") {
        CHECK_THROWS_AS(decode_idx(labels, labels), FormatError);
    }
    SUBCASE("empty files") {
        CHECK_THROWS_AS(decode_idx(std::vector<char>{}, labels), FormatError);
        CHECK_THROWS_AS(decode_idx(images, std::vector<char>{}), FormatError);
    }
    SUBCASE("truncated payloads") {
        auto short_images = images;
        short_images.pop_back();
        CHECK_THROWS_AS(decode_idx(short_images, labels), FormatError);
        auto short_labels = labels;
        short_labels.pop_back();
        CHECK_THROWS_AS(decode_idx(images, short_labels), FormatError);
        auto header_only = std::vector<char>(images.begin(), images.begin() + 6);
        CHECK_THROWS_AS(decode_idx(header_only, labels), FormatError);
    }
    SUBCASE("count mismatch") {
        const std::vector<std::uint8_t> three{1, 2, 3};
        CHECK_THROWS_AS(decode_idx(images, encode_idx_labels(three)), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_idx("/nonexistent/a.idx3", "/nonexistent/b.idx1"), IoError);
    }
}

TEST_CASE("role names round trip") {
    for (auto r : {Role::Labeled, Role::Unlabeled, Role::Test}) {
        CHECK(parse_role(to_string(r)) == r);
    }
    CHECK_THROWS_AS(parse_role("train"), FormatError);
}
