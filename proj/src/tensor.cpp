#include "tfv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tfv {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) {
            throw ShapeError("negative dimension in shape " + shape_string(shape));
        }
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                         std::to_string(data_.size()) + " values");
    }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(std::vector<int> shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
}

bool all_finite(std::span<const double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

VideoTensor::VideoTensor(int frames, int channels, int height, int width, double fill,
                         double frame_rate)
    : data_({frames, channels, height, width}, fill), frame_rate_(frame_rate) {}

VideoTensor::VideoTensor(Tensor data, double frame_rate)
    : data_(std::move(data)), frame_rate_(frame_rate) {
    if (data_.rank() != 4) {
        throw ShapeError("video tensor needs rank 4 (F, C, H, W), got " +
                         shape_string(data_.shape()));
    }
}

VideoTensor VideoTensor::frame_video(int f) const {
    if (f < 0 || f >= frames()) throw RangeError("frame index out of range");
    VideoTensor out(1, channels(), height(), width(), 0.0, frame_rate_);
    auto src = frame(f);
    std::copy(src.begin(), src.end(), out.values().begin());
    return out;
}

void require_same_shape(const VideoTensor& a, const VideoTensor& b, const char* what) {
    require_same_shape(a.tensor(), b.tensor(), what);
}

VideoTensor stack_frames(std::span<const VideoTensor> clips) {
    if (clips.empty()) throw ShapeError("stack_frames: no clips");
    const auto& first = clips.front();
    int total = 0;
    for (const auto& c : clips) {
        if (c.channels() != first.channels() || c.height() != first.height() ||
            c.width() != first.width()) {
            throw ShapeError("stack_frames: frame geometry differs");
        }
        total += c.frames();
    }
    VideoTensor out(total, first.channels(), first.height(), first.width(), 0.0,
                    first.frame_rate());
    auto dst = out.values().begin();
    for (const auto& c : clips) dst = std::copy(c.values().begin(), c.values().end(), dst);
    return out;
}

} // namespace tfv
