#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "tfv/error.hpp"

namespace tfv {

// Cache-line aligned storage. Vectorized kernels peel a different number of
// leading elements depending on the buffer address, so a fixed alignment keeps
// results independent of where the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

// Dense row-major array of doubles with a runtime shape.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> values);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    void fill(double v);
    Tensor reshaped(std::vector<int> shape) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool operator==(const Tensor& other) const = default;

private:
    std::vector<int> shape_;
    AlignedBuffer data_;
};

std::string shape_string(const std::vector<int>& shape);
size_t shape_numel(const std::vector<int>& shape);

// Throws ShapeError naming `what` when shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

bool all_finite(std::span<const double> xs);
double max_abs_diff(const Tensor& a, const Tensor& b);

// A clip of F frames with C channels of H x W pixels; F == 1 is a still image.
class VideoTensor {
public:
    VideoTensor() = default;
    VideoTensor(int frames, int channels, int height, int width, double fill = 0.0,
                double frame_rate = 4.0);
    VideoTensor(Tensor data, double frame_rate = 4.0);

    int frames() const { return data_.dim(0); }
    int channels() const { return data_.dim(1); }
    int height() const { return data_.dim(2); }
    int width() const { return data_.dim(3); }
    size_t frame_size() const {
        return static_cast<size_t>(channels()) * height() * width();
    }
    size_t size() const { return data_.size(); }

    double frame_rate() const { return frame_rate_; }
    void set_frame_rate(double fps) { frame_rate_ = fps; }

    double& at(int f, int c, int y, int x) { return data_[index(f, c, y, x)]; }
    double at(int f, int c, int y, int x) const { return data_[index(f, c, y, x)]; }

    std::span<double> frame(int f) {
        return data_.values().subspan(static_cast<size_t>(f) * frame_size(), frame_size());
    }
    std::span<const double> frame(int f) const {
        return data_.values().subspan(static_cast<size_t>(f) * frame_size(), frame_size());
    }
    VideoTensor frame_video(int f) const;

    Tensor& tensor() { return data_; }
    const Tensor& tensor() const { return data_; }
    std::span<double> values() { return data_.values(); }
    std::span<const double> values() const { return data_.values(); }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    bool same_shape(const VideoTensor& other) const { return data_.same_shape(other.data_); }
    bool operator==(const VideoTensor& other) const { return data_ == other.data_; }

private:
    size_t index(int f, int c, int y, int x) const {
        return ((static_cast<size_t>(f) * channels() + c) * height() + y) * width() + x;
    }

    Tensor data_{std::vector<int>{0, 0, 0, 0}};
    double frame_rate_ = 4.0;
};

void require_same_shape(const VideoTensor& a, const VideoTensor& b, const char* what);

// Concatenate videos along the frame axis; all inputs share C, H, W.
VideoTensor stack_frames(std::span<const VideoTensor> clips);

} // namespace tfv
