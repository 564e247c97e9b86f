#include "tfv/evaluation.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "tfv/denoiser.hpp"
#include "tfv/random.hpp"

namespace tfv {

Embedder make_reference_embedder(std::uint64_t seed, int channels, int width, int embed_dim) {
    Embedder e;
    e.embed_dim = embed_dim;
    Rng rng = make_rng(seed, 0xe3b);
    init_image_encoder(e.params, {channels, width, embed_dim}, rng);
    return e;
}

std::vector<double> embed_frame(const Embedder& e, const VideoTensor& video, int frame) {
    return encode_frame(e.params, video, frame);
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return aa == bb ? 1.0 : 0.0;
    return ab / std::sqrt(aa * bb);
}

double map_error(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& conds,
                 Tensor (*proxy)(const VideoTensor&, int), const char* what) {
    if (videos.size() != conds.size()) throw ShapeError(std::string(what) + ": count mismatch");
    if (videos.empty()) throw RangeError(std::string(what) + ": no videos");
    double sum = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < videos.size(); ++i) {
        const VideoTensor& v = videos[i];
        const Tensor& c = conds[i];
        if (c.shape() != std::vector<int>{v.frames(), 1, v.height(), v.width()}) {
            throw ShapeError(std::string(what) + ": condition maps must be (F, 1, H, W) of the video");
        }
        const size_t P = static_cast<size_t>(v.height()) * v.width();
        for (int f = 0; f < v.frames(); ++f) {
            const Tensor m = proxy(v, f);
            for (size_t p = 0; p < P; ++p) sum += std::abs(m[p] - c[f * P + p]);
        }
        n += c.size();
    }
    return sum / static_cast<double>(n);
}

} // namespace

double mean_adjacent_cosine(const std::vector<std::vector<std::vector<double>>>& sequences) {
    double sum = 0.0;
    size_t pairs = 0;
    for (const auto& seq : sequences)
        for (size_t f = 1; f < seq.size(); ++f) {
            sum += cosine(seq[f - 1], seq[f]);
            ++pairs;
        }
    if (pairs == 0) throw RangeError("mean_adjacent_cosine: no adjacent pairs");
    return sum / static_cast<double>(pairs);
}

double frame_consistency(const std::vector<VideoTensor>& videos, const Embedder& e) {
    if (videos.empty()) throw RangeError("frame_consistency: no videos");
    std::vector<std::vector<std::vector<double>>> seqs;
    for (const VideoTensor& v : videos) {
        if (v.frames() < 2) throw RangeError("frame_consistency: every video needs F >= 2");
        auto& seq = seqs.emplace_back();
        for (int f = 0; f < v.frames(); ++f) seq.push_back(embed_frame(e, v, f));
    }
    return mean_adjacent_cosine(seqs);
}

double depth_error(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& depth) {
    return map_error(videos, depth, depth_proxy, "depth_error");
}

double sketch_error(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& sketch) {
    return map_error(videos, sketch, sketch_proxy, "sketch_error");
}

int Track::detected_count() const {
    return static_cast<int>(std::count(detected.begin(), detected.end(), true));
}

Track track_sprite(const VideoTensor& video) {
    Track t;
    for (int f = 0; f < video.frames(); ++f) {
        const SpriteDetection d = detect_sprite(video, f);
        t.detected.push_back(d.area >= kMinSpriteArea);
        t.cx.push_back(d.cx);
        t.cy.push_back(d.cy);
        t.area.push_back(d.area);
        t.weight_sum.push_back(d.weight_sum);
    }
    return t;
}

EpeResult epe(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& motion_maps) {
    if (videos.size() != motion_maps.size()) throw ShapeError("epe: count mismatch");
    EpeResult r;
    double sum = 0.0;
    for (size_t i = 0; i < videos.size(); ++i) {
        const VideoTensor& v = videos[i];
        const Tensor& mv = motion_maps[i];
        const int F = v.frames();
        if (mv.shape() != std::vector<int>{F, 2, v.height(), v.width()}) {
            throw ShapeError("epe: motion maps must be (F, 2, H, W) of the video");
        }
        const Track t = track_sprite(v);
        if (F < 2 || t.detected_count() < kMinDetectedShare * F) {
            ++r.excluded;
            continue;
        }
        const size_t P = static_cast<size_t>(v.height()) * v.width();
        int pairs = 0;
        for (int f = 0; f + 1 < F; ++f) {
            if (!t.detected[f] || !t.detected[f + 1]) continue;
            double rx = 0.0, ry = 0.0;
            int n = 0;
            for (size_t p = 0; p < P; ++p) {
                const double ux = mv[(f * 2) * P + p], uy = mv[(f * 2 + 1) * P + p];
                if (ux == 0.0 && uy == 0.0) continue;
                rx += ux;
                ry += uy;
                ++n;
            }
            if (n) {
                rx /= n;
                ry /= n;
            }
            sum += std::hypot(t.cx[f + 1] - t.cx[f] - rx, t.cy[f + 1] - t.cy[f] - ry);
            ++pairs;
        }
        if (pairs == 0) {
            ++r.excluded;
            continue;
        }
        r.pairs += pairs;
        ++r.items;
    }
    if (r.items == 0) throw RangeError("epe: every item was excluded (sprite not detectable)");
    r.epe = sum / r.pairs;
    return r;
}

double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b, double ridge) {
    if (a.size() < 2 || b.size() < 2) throw RangeError("frechet_distance: need >= 2 items per set");
    const size_t d = a.front().size();
    for (const auto* set : {&a, &b})
        for (const auto& x : *set)
            if (x.size() != d) throw ShapeError("frechet_distance: feature widths differ");

    auto stats = [&](const std::vector<std::vector<double>>& s) {
        Eigen::MatrixXd X(s.size(), d);
        for (size_t i = 0; i < s.size(); ++i)
            for (size_t j = 0; j < d; ++j) X(i, j) = s[i][j];
        Eigen::VectorXd mu = X.colwise().mean();
        Eigen::MatrixXd C = X.rowwise() - mu.transpose();
        Eigen::MatrixXd cov = (C.transpose() * C) / static_cast<double>(s.size() - 1);
        cov += ridge * Eigen::MatrixXd::Identity(d, d);
        return std::make_pair(mu, cov);
    };
    const auto [mu1, s1] = stats(a);
    const auto [mu2, s2] = stats(b);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
    const Eigen::VectorXd ev1 = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd root1 = e1.eigenvectors() * ev1.asDiagonal() * e1.eigenvectors().transpose();
    Eigen::MatrixXd m = root1 * s2 * root1;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, value);
}

std::vector<double> video_feature(const Embedder& e, const VideoTensor& video) {
    const int F = video.frames();
    const size_t D = static_cast<size_t>(e.embed_dim);
    std::vector<double> out(2 * D, 0.0);
    std::vector<double> prev;
    for (int f = 0; f < F; ++f) {
        std::vector<double> cur = embed_frame(e, video, f);
        for (size_t k = 0; k < D; ++k) out[k] += cur[k] / F;
        if (f > 0)
            for (size_t k = 0; k < D; ++k) out[D + k] += (cur[k] - prev[k]) / (F - 1);
        prev = std::move(cur);
    }
    return out;
}

double frechet_feature_distance(const std::vector<VideoTensor>& generated,
                                const std::vector<VideoTensor>& reference, const Embedder& e) {
    std::vector<std::vector<double>> a, b;
    for (const auto& v : generated) a.push_back(video_feature(e, v));
    for (const auto& v : reference) b.push_back(video_feature(e, v));
    return frechet_distance(a, b);
}

namespace {

// Area of a sprite of unit size for each shape.
double unit_area(Shape s) {
    switch (s) {
    case Shape::circle: return std::numbers::pi / 4.0;
    case Shape::square: return 1.0;
    case Shape::triangle: return 0.5;
    }
    return 1.0;
}

double correlation(const Tensor& a, const Tensor& b) {
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += (a[i] - ma) * (b[i] - mb);
        aa += (a[i] - ma) * (a[i] - ma);
        bb += (b[i] - mb) * (b[i] - mb);
    }
    return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
}

} // namespace

CaptionGuess classify_video(const VideoTensor& video) {
    CaptionGuess g;
    const int F = video.frames(), H = video.height(), W = video.width();
    const Track track = track_sprite(video);
    if (track.detected_count() == 0 || track.detected_count() < kMinDetectedShare * F) return g;
    g.detected = true;

    // colour: chroma of the weighted mean colour, nearest hue by cosine
    std::array<double, 3> rgb{};
    double wsum = 0.0;
    std::array<double, kNumShapes> shape_score{};
    std::array<double, kNumShapes> shape_size{};
    int frames_used = 0;
    for (int f = 0; f < F; ++f) {
        if (!track.detected[f]) continue;
        const SpriteDetection d = detect_sprite(video, f);
        for (int c = 0; c < 3; ++c) rgb[c] += d.weight_sum * d.mean_rgb[c];
        wsum += d.weight_sum;

        // shape: correlate the soft mask with each shape's coverage at the
        // size implied by the soft area, keeping the best of a few scales
        for (int s = 0; s < kNumShapes; ++s) {
            const double size = std::sqrt(d.weight_sum / unit_area(static_cast<Shape>(s)));
            double best = -2.0;
            for (double k : {0.9, 1.0, 1.1}) {
                const Tensor cov = sprite_coverage(static_cast<Shape>(s), k * size, d.cx, d.cy, H, W);
                best = std::max(best, correlation(d.weight, cov));
            }
            shape_score[s] += best;
            shape_size[s] += size;
        }
        ++frames_used;
    }
    const double mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    std::vector<double> chroma = {rgb[0] - mean, rgb[1] - mean, rgb[2] - mean};
    double best_c = -2.0;
    for (int c = 0; c < kNumColors; ++c) {
        const auto ref = color_rgb(static_cast<Color>(c));
        const double rm = (ref[0] + ref[1] + ref[2]) / 3.0;
        const double cs = cosine(chroma, {ref[0] - rm, ref[1] - rm, ref[2] - rm});
        if (cs > best_c) {
            best_c = cs;
            g.color = static_cast<Color>(c);
        }
    }
    const int best_s = static_cast<int>(std::max_element(shape_score.begin(), shape_score.end()) -
                                        shape_score.begin());
    g.shape = static_cast<Shape>(best_s);
    const double size = shape_size[best_s] / frames_used;

    // velocity: least-squares slope of the centroid track
    double sf = 0.0, sff = 0.0, sx = 0.0, sy = 0.0, sfx = 0.0, sfy = 0.0;
    int n = 0;
    for (int f = 0; f < F; ++f) {
        if (!track.detected[f]) continue;
        sf += f;
        sff += static_cast<double>(f) * f;
        sx += track.cx[f];
        sy += track.cy[f];
        sfx += f * track.cx[f];
        sfy += f * track.cy[f];
        ++n;
    }
    const double den = n * sff - sf * sf;
    if (n >= 2 && den > 0.0) {
        g.velocity_x = (n * sfx - sf * sx) / den;
        g.velocity_y = (n * sfy - sf * sy) / den;
    }
    const double speed = std::hypot(g.velocity_x, g.velocity_y);
    if (F >= 2 && speed >= 0.05) {
        const double angle = std::atan2(-g.velocity_y, g.velocity_x);
        int k = static_cast<int>(std::lround(angle / (std::numbers::pi / 4.0)));
        g.direction = static_cast<Direction>(((k % kNumDirections) + kNumDirections) % kNumDirections);
    }
    const double fast = speed_px_per_frame(Speed::fast, size, F, std::min(H, W));
    g.speed = speed > 0.75 * fast ? Speed::fast : Speed::slow;
    return g;
}

CaptionAccuracy caption_accuracy(const std::vector<VideoTensor>& videos,
                                 const std::vector<CaptionSpec>& specs) {
    if (videos.size() != specs.size()) throw ShapeError("caption_accuracy: count mismatch");
    if (videos.empty()) throw RangeError("caption_accuracy: no videos");
    CaptionAccuracy acc;
    std::array<int, 4> hits{};
    for (size_t i = 0; i < videos.size(); ++i) {
        const CaptionSpec& s = specs[i];
        const CaptionGuess g = classify_video(videos[i]);
        const bool motion = videos[i].frames() >= 2 && s.has_motion_words;
        acc.counts[0] += 1;
        acc.counts[1] += 1;
        hits[0] += g.detected && g.shape == s.shape;
        hits[1] += g.detected && g.color == s.color;
        if (motion) {
            acc.counts[2] += 1;
            acc.counts[3] += 1;
            hits[2] += g.detected && g.direction && *g.direction == s.direction;
            hits[3] += g.detected && g.speed == s.speed;
        }
    }
    int total_hits = 0, total = 0;
    for (int k = 0; k < 4; ++k) {
        acc.per_attribute[k] = acc.counts[k] ? static_cast<double>(hits[k]) / acc.counts[k] : 0.0;
        total_hits += hits[k];
        total += acc.counts[k];
    }
    acc.accuracy = static_cast<double>(total_hits) / total;
    return acc;
}

namespace {

constexpr const char* kAttributeNames[4] = {"shape", "color", "direction", "speed"};

nlohmann::json body_json(const MetricsReport& r) {
    nlohmann::json metrics = nlohmann::json::object();
    auto put = [&](const char* name, const std::optional<double>& v) {
        if (v) metrics[name] = *v;
    };
    put("frame_consistency", r.frame_consistency);
    put("depth_error", r.depth_error);
    put("sketch_error", r.sketch_error);
    put("epe", r.epe);
    put("frechet_distance", r.frechet_distance);
    put("caption_accuracy", r.caption_accuracy);
    nlohmann::json j = {{"format", "tfv-metrics"},
                        {"version", 1},
                        {"label", r.label},
                        {"metrics", metrics},
                        {"counts", r.counts}};
    if (r.caption_breakdown) {
        nlohmann::json b = nlohmann::json::object();
        for (int k = 0; k < 4; ++k) {
            b[kAttributeNames[k]] = {{"accuracy", r.caption_breakdown->per_attribute[k]},
                                     {"count", r.caption_breakdown->counts[k]}};
        }
        j["caption_breakdown"] = b;
    }
    return j;
}

} // namespace

std::uint64_t MetricsReport::checksum() const {
    const std::string s = body_json(*this).dump();
    return fnv1a64(s.data(), s.size());
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j = body_json(*this);
    j["checksum"] = checksum_hex(checksum());
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    if (j.value("format", std::string()) != "tfv-metrics" || j.value("version", 0) != 1) {
        throw IntegrityError("not a version-1 metrics report");
    }
    MetricsReport r;
    r.label = j.at("label").get<std::string>();
    const auto& m = j.at("metrics");
    auto get = [&](const char* name, std::optional<double>& out) {
        if (m.contains(name)) out = m.at(name).get<double>();
    };
    get("frame_consistency", r.frame_consistency);
    get("depth_error", r.depth_error);
    get("sketch_error", r.sketch_error);
    get("epe", r.epe);
    get("frechet_distance", r.frechet_distance);
    get("caption_accuracy", r.caption_accuracy);
    r.counts = j.at("counts").get<std::map<std::string, std::int64_t>>();
    if (j.contains("caption_breakdown")) {
        CaptionAccuracy b;
        b.accuracy = r.caption_accuracy.value_or(0.0);
        for (int k = 0; k < 4; ++k) {
            const auto& e = j.at("caption_breakdown").at(kAttributeNames[k]);
            b.per_attribute[k] = e.at("accuracy").get<double>();
            b.counts[k] = e.at("count").get<int>();
        }
        r.caption_breakdown = b;
    }
    if (j.value("checksum", std::string()) != checksum_hex(r.checksum())) {
        throw IntegrityError("metrics report checksum mismatch");
    }
    return r;
}

void write_report(const std::filesystem::path& path, const MetricsReport& r) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IntegrityError("cannot write " + tmp);
        os << r.to_json().dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

MetricsReport read_report(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IntegrityError("missing metrics report " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed metrics report " + path.string() + ": " + e.what());
    }
    return MetricsReport::from_json(j);
}

} // namespace tfv
