#pragma once

// Minimal tape-based reverse-mode differentiation over Tensor values, with
// just the operators the denoiser and image encoder need.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tfv/tensor.hpp"

namespace tfv::ad {

class Graph;

// Handle to a node on a Graph tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    // With tracking off, parameters enter as constants and no backward
    // closures (or their cached buffers) are kept.
    explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

    Var constant(Tensor value);
    // Leaf that accumulates a gradient.
    Var input(Tensor value);
    // Named parameter leaf; repeated calls with one name return the same node.
    Var param(const std::string& name, const Tensor& value);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    // Gradient of the last backward() target; zero tensor if never reached.
    Tensor grad(Var v) const;

    // Reverse sweep from a scalar node, seeding d(out) = seed.
    void backward(Var out, double seed = 1.0);

    const std::map<std::string, Var>& params() const { return params_; }
    size_t size() const { return nodes_.size(); }

    // Operator plumbing.
    Var make(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    // Gradient buffer of node `id`, allocated (zeroed) on first touch.
    Tensor& grad_buffer(int id);
    const Tensor& value_of(int id) const { return nodes_[id].value; }
    bool needs(Var v) const { return nodes_[v.id].requires_grad; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::map<std::string, Var> params_;
    bool track_ = true;
};

Var add(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
// x: (N, C, H, W) or (C); bias: (C) broadcast over everything but C.
Var add_channel_bias(Graph& g, Var x, Var bias);
Var silu(Graph& g, Var x);
// x: (in), w: (out, in), b: (out)
Var linear(Graph& g, Var x, Var w, Var b);
// x: (N, Cin, H, W), w: (Cout, Cin, k, k) with k in {1, 3}, b: (Cout); "same" padding.
Var conv2d(Graph& g, Var x, Var w, Var b);
Var avg_pool2(Graph& g, Var x);
Var upsample2(Graph& g, Var x);
Var concat_channels(Graph& g, Var a, Var b);
// Per-pixel convolution along the frame axis. x: (F, Cin, H, W),
// w: (Cout, Cin, 3), b: (Cout); edge frames are replicated as padding.
Var temporal_conv(Graph& g, Var x, Var w, Var b);
// Per-pixel softmax attention over frames. q, k, v: (F, C, H, W).
Var temporal_attention(Graph& g, Var q, Var k, Var v);
// Mean over N, H, W of (N, C, H, W) -> (C).
Var global_avg_pool(Graph& g, Var x);
// Mean squared error against a constant target -> scalar (shape {1}).
Var mse(Graph& g, Var pred, const Tensor& target);
// Adjacent-frame-difference mismatch against a constant target, normalized by
// (F - 1) * frame size -> scalar. Zero (constant) when F < 2.
Var frame_difference_mse(Graph& g, Var pred, const Tensor& target);

} // namespace tfv::ad
