#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tfv/data.hpp"

using namespace tfv;

namespace {

SpriteVideoSpec spec_at(Shape shape, double vx, double vy, double x = 10.0, double y = 12.0) {
    SpriteVideoSpec s;
    s.caption = {shape, Color::green, Direction::E, Speed::slow, true};
    s.size_px = 8.0;
    s.start_x = x;
    s.start_y = y;
    s.velocity_x = vx;
    s.velocity_y = vy;
    s.background_seed = 3;
    return s;
}

// Bilinear sample over pixel centres with edge clamping.
double bilinear(const VideoTensor& v, int f, int c, double x, double y) {
    const int H = v.height(), W = v.width();
    x -= 0.5;
    y -= 0.5;
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double ax = x - x0, ay = y - y0;
    auto at = [&](int yy, int xx) {
        return v.at(f, c, std::clamp(yy, 0, H - 1), std::clamp(xx, 0, W - 1));
    };
    return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
           ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
}

std::filesystem::path scratch(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("static sprite renders identical frames") {
    const VideoTensor v = render_video(spec_at(Shape::square, 0, 0), 6, 32, 32);
    for (int f = 1; f < 6; ++f)
        CHECK(std::equal(v.frame(f).begin(), v.frame(f).end(), v.frame(0).begin()));
}

TEST_CASE("render is deterministic and bounded") {
    const auto s = spec_at(Shape::triangle, 0.7, -0.2);
    const VideoTensor a = render_video(s, 16, 32, 32);
    CHECK(a == render_video(s, 16, 32, 32));
    for (double x : a.values()) {
        CHECK(x >= -1.0);
        CHECK(x <= 1.0);
    }
}

TEST_CASE("unit velocity moves the centroid one pixel per frame") {
    for (Shape shape : {Shape::circle, Shape::square, Shape::triangle}) {
        const VideoTensor v = render_video(spec_at(shape, 1.0, 0.0, 9.3, 14.6), 12, 32, 32);
        double prev_x = detect_sprite(v, 0).cx;
        for (int f = 1; f < 12; ++f) {
            const auto d = detect_sprite(v, f);
            CHECK(d.cx - prev_x == doctest::Approx(1.0).epsilon(0.1));
            CHECK(std::abs(d.cx - prev_x - 1.0) <= 0.1);
            prev_x = d.cx;
        }
    }
}

TEST_CASE("out-of-bounds trajectories are rejected") {
    CHECK_THROWS_AS(render_video(spec_at(Shape::circle, 2.0, 0.0), 16, 32, 32), RangeError);
    CHECK_THROWS_AS(render_video(spec_at(Shape::circle, 0.0, 0.0, 2.0, 16.0), 1, 32, 32),
                    RangeError);
}

TEST_CASE("sampled specs stay in bounds and match their speed bucket") {
    Rng rng = make_rng(5);
    for (int i = 0; i < 2000; ++i) {
        const CaptionSpec c = sample_caption(rng);
        for (auto [F, H, W] : {std::tuple{16, 32, 32}, std::tuple{8, 16, 16}, std::tuple{1, 32, 32}}) {
            const SpriteVideoSpec s = sample_sprite_spec(c, F, H, W, rng);
            CHECK(trajectory_in_bounds(s, F, H, W));
            const double speed = std::hypot(s.velocity_x, s.velocity_y);
            CHECK(speed == doctest::Approx(speed_px_per_frame(c.speed, s.size_px, F, W)));
        }
    }
    CHECK(speed_px_per_frame(Speed::slow, 8, 16, 32) ==
          doctest::Approx(0.5 * speed_px_per_frame(Speed::fast, 8, 16, 32)));
}

TEST_CASE("orientation cue follows the heading") {
    auto s = spec_at(Shape::circle, 0.0, 0.0, 16.0, 16.0);
    s.caption.direction = Direction::E;
    const auto east = detect_sprite(render_video(s, 1, 32, 32), 0);
    s.caption.direction = Direction::W;
    const auto west = detect_sprite(render_video(s, 1, 32, 32), 0);
    // the darker dot lowers saturation on its side, pulling the weighted
    // centroid away from the heading
    CHECK(east.cx < west.cx);
    CHECK(east.area == west.area);
}

TEST_CASE("blank frames give empty proxies") {
    const VideoTensor blank(1, 3, 16, 16, -0.2);
    const Tensor depth = depth_proxy(blank, 0), sketch = sketch_proxy(blank, 0);
    for (double v : depth.values()) CHECK(v == 0.0);
    for (double v : sketch.values()) CHECK(v == 0.0);
    CHECK(detect_sprite(blank, 0).area == 0.0);
}

TEST_CASE("motion vector maps") {
    const auto still = motion_vector_maps(spec_at(Shape::square, 0, 0), 4, 32, 32);
    for (double v : still.values()) CHECK(v == 0.0);

    const auto s = spec_at(Shape::circle, 1.0, 0.0);
    const Tensor mv = motion_vector_maps(s, 5, 32, 32);
    const VideoTensor v = render_video(s, 5, 32, 32);
    const size_t P = 32 * 32;
    for (int f = 0; f < 5; ++f) {
        const Tensor m = detect_sprite(v, f).mask;
        for (size_t p = 0; p < P; ++p) {
            CHECK(mv[(f * 2) * P + p] == m[p]);
            CHECK(mv[(f * 2 + 1) * P + p] == 0.0);
        }
    }
}

TEST_CASE("depth and sketch proxies") {
    const VideoTensor v = render_video(spec_at(Shape::square, 0, 0, 16, 16), 1, 32, 32);
    const auto d = detect_sprite(v, 0);
    const Tensor depth = depth_proxy(v, 0);
    for (size_t p = 0; p < depth.size(); ++p)
        CHECK(depth[p] == (d.mask[p] > 0 ? std::sqrt(d.area) / 32.0 : 0.0));
    CHECK(d.area == doctest::Approx(64.0).epsilon(0.1));
    const Tensor sketch = sketch_proxy(v, 0);
    double edges = 0;
    for (double x : sketch.values()) edges += x;
    CHECK(edges > 20);
    // the centre of the square away from the dot has no edge response
    CHECK(sketch[static_cast<size_t>(15) * 32 + 14] == 0.0);
    // re-extracting from an identical re-render is idempotent
    const VideoTensor again = render_video(spec_at(Shape::square, 0, 0, 16, 16), 1, 32, 32);
    CHECK(depth_proxy(again, 0) == depth);
    CHECK(sketch_proxy(again, 0) == sketch);
}

TEST_CASE("ground-truth flow warps frame j onto frame j+1") {
    // pooled over a corpus of clips; single clips with thin diagonal edges
    // carry more bilinear interpolation error
    Rng rng = make_rng(17);
    double total = 0.0;
    long total_n = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const SpriteVideoSpec s = sample_sprite_spec(sample_caption(rng), 16, 32, 32, rng);
        const VideoTensor v = render_video(s, 16, 32, 32);
        double err = 0.0;
        long n = 0;
        for (int f = 0; f + 1 < 16; ++f) {
            const Tensor mask = detect_sprite(v, f + 1).mask;
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    if (mask[static_cast<size_t>(y) * 32 + x] == 0.0) continue;
                    for (int c = 0; c < 3; ++c) {
                        const double w = bilinear(v, f, c, x + 0.5 - s.velocity_x, y + 0.5 - s.velocity_y);
                        err += std::abs(w - v.at(f + 1, c, y, x));
                        ++n;
                    }
                }
        }
        CHECK(err / n < 0.1);
        total += err;
        total_n += n;
    }
    CHECK(total / total_n < 0.05);
}

TEST_CASE("corpus construction") {
    CHECK_THROWS_AS(make_image_text_pairs(0, 1, {}), RangeError);
    const Corpus images = make_image_text_pairs(10, 1, {});
    CHECK(images.dims.frames == 1);
    CHECK(images.render(3).frames() == 1);
    for (size_t i = 0; i < images.size(); ++i) CHECK(images.training_caption(i).has_value());

    const Corpus free = make_text_free_videos(10, 1, {});
    CHECK(free.dims.frames == 16);
    for (size_t i = 0; i < free.size(); ++i) CHECK_FALSE(free.training_caption(i).has_value());
    const Corpus paired = make_video_text_pairs(10, 1, {});
    for (size_t i = 0; i < paired.size(); ++i) CHECK(paired.training_caption(i).has_value());

    // items depend only on (seed, kind, index)
    const Corpus longer = make_text_free_videos(20, 1, {});
    for (size_t i = 0; i < 10; ++i) CHECK(longer.items[i].spec == free.items[i].spec);
    CHECK_FALSE(make_text_free_videos(10, 2, {}).items[0].spec == free.items[0].spec);
}

TEST_CASE("corpus attribute marginals are uniform (Monte Carlo)") {
    const size_t n = 10000;
    const Corpus c = make_text_free_videos(n, 77, {});
    int shape[kNumShapes] = {}, color[kNumColors] = {}, dir[kNumDirections] = {}, speed[kNumSpeeds] = {};
    for (const auto& it : c.items) {
        ++shape[static_cast<int>(it.spec.caption.shape)];
        ++color[static_cast<int>(it.spec.caption.color)];
        ++dir[static_cast<int>(it.spec.caption.direction)];
        ++speed[static_cast<int>(it.spec.caption.speed)];
    }
    auto check = [&](const int* counts, int k) {
        const double p = 1.0 / k, sigma = std::sqrt(n * p * (1 - p));
        for (int i = 0; i < k; ++i) CHECK(std::abs(counts[i] - n * p) < 3 * sigma);
    };
    check(shape, kNumShapes);
    check(color, kNumColors);
    check(dir, kNumDirections);
    check(speed, kNumSpeeds);
}

TEST_CASE("vid container round trip") {
    const auto dir = scratch("tfv_test_vid");
    const VideoTensor v = render_video(spec_at(Shape::circle, 0.5, 0.5), 3, 32, 32, 8.0);
    write_vid(dir / "a.vid", v, StoredType::float64);
    const VideoTensor back = read_vid(dir / "a.vid");
    CHECK(back == v);
    CHECK(back.frame_rate() == 8.0);
    write_vid(dir / "b.vid", v);
    CHECK(read_vid(dir / "b.vid") == round_to_float32(v));
    {
        std::ofstream os(dir / "c.vid", std::ios::binary);
        os << "TFVID 1 1 3 2 2 float32 fps=4\n" << "short";
    }
    CHECK_THROWS_AS(read_vid(dir / "c.vid"), IntegrityError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("corpus manifest round trip, regeneration and integrity") {
    const auto dir = scratch("tfv_test_corpus");
    CorpusDims dims;
    dims.frames = 4;
    const Corpus c = make_video_text_pairs(5, 9, dims);
    write_corpus(dir, c, true);
    CHECK(std::filesystem::exists(dir / "manifest"));
    CHECK(std::filesystem::exists(dir / "items/00004.vid"));
    CHECK(std::filesystem::exists(dir / "conds/00002.mv"));

    const Corpus back = read_corpus(dir);
    CHECK(back.kind == c.kind);
    CHECK(back.seed == c.seed);
    CHECK(back.dims == c.dims);
    REQUIRE(back.size() == c.size());
    for (size_t i = 0; i < c.size(); ++i) {
        CHECK(back.items[i].spec == c.items[i].spec);
        CHECK(back.items[i].caption_available == c.items[i].caption_available);
        // stored tensors equal a fresh render from the stored seed
        const Corpus regen = make_video_text_pairs(5, back.seed, back.dims);
        CHECK(load_item(dir, i) == round_to_float32(regen.render(i)));
    }

    // corrupt one item file
    {
        std::fstream fs(dir / "items/00001.vid", std::ios::in | std::ios::out | std::ios::binary);
        fs.seekp(-3, std::ios::end);
        fs.put('\x7f');
    }
    CHECK_THROWS_AS(read_corpus(dir), IntegrityError);

    // tamper with the manifest itself
    write_corpus(dir, c, false);
    std::string text;
    {
        std::ifstream is(dir / "manifest", std::ios::binary);
        text.assign(std::istreambuf_iterator<char>(is), {});
    }
    const auto pos = text.find("\"seed\":9");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 8, "\"seed\":8");
    {
        std::ofstream os(dir / "manifest", std::ios::binary | std::ios::trunc);
        os << text;
    }
    CHECK_THROWS_AS(read_corpus(dir), IntegrityError);
    std::filesystem::remove(dir / "manifest");
    CHECK_THROWS_AS(read_corpus(dir), IntegrityError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("structural map stacking") {
    const auto s = spec_at(Shape::circle, 1.0, 0.5);
    const VideoTensor v = render_video(s, 3, 32, 32);
    const StructuralMaps all = structural_maps_for(s, v, true, true, true);
    CHECK(all.maps.shape() == std::vector<int>{3, 4, 32, 32});
    CHECK(all.any());
    const StructuralMaps depth_only = structural_maps_for(s, v, true, false, false);
    const size_t P = 32 * 32;
    for (int f = 0; f < 3; ++f)
        for (size_t p = 0; p < P; ++p) {
            CHECK(depth_only.maps[(f * 4 + kDepthChannel) * P + p] == all.maps[(f * 4 + kDepthChannel) * P + p]);
            CHECK(depth_only.maps[(f * 4 + kSketchChannel) * P + p] == 0.0);
            CHECK(depth_only.maps[(f * 4 + kMotionYChannel) * P + p] == 0.0);
        }
    CHECK_FALSE(structural_maps_for(s, v, false, false, false).any());
}
