#pragma once

#include <functional>
#include <vector>

#include "nslam/tensor.hpp"

namespace nslam::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; invalid after Tape::reset().
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
};

// Define-by-run reverse-mode tape. Rebuilt each forward pass; single-threaded.
// Every op appends one node; backward() replays nodes in reverse, so each node
// is visited exactly once and gradients sum over all consumers.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf that participates in differentiation (model parameters, chained state).
    Var leaf(Tensor v);
    // Leaf referencing external storage; caller keeps it alive for the tape's lifetime.
    Var borrow(const Tensor* v);
    // Value that never receives gradient (observations, detached beliefs, returns).
    Var constant(Tensor v);

    void backward(const Var& loss);

    const Tensor& value(const Var& v) const;
    // Gradient accumulated at a node; empty tensor if the node was never touched.
    const Tensor& grad(const Var& v) const;

    void zero_grads();
    void reset();  // drop all nodes, keep allocated capacity

    int size() const { return static_cast<int>(nodes_.size()); }

private:
    friend struct Var;
    friend class OpBuilder;

    struct Node {
        Tensor value;
        const Tensor* external = nullptr;  // set for borrowed leaves
        Tensor grad;                       // lazily sized at first accumulation
        bool requires_grad = false;
        // Pulls this node's grad and scatters into input nodes' grads.
        std::function<void(Tape&, int)> back;
    };

    int push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> back);

    const Tensor& node_value(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.external ? *n.external : n.value;
    }
    Tensor& grad_buffer(int id);  // allocates zeros on first use

    std::vector<Node> nodes_;
    Tensor empty_;
};

// ---- primitive operations ----
// All ops validate shapes and throw std::invalid_argument naming the primitive.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& v, const Var& s);         // s: 1-element
Var scale_const(const Var& v, real c);
Var add_const(const Var& v, real c);
Var matvec(const Var& w, const Var& x);        // {m,n} x {n} -> {m}
Var sigmoid(const Var& v);
Var tanh_op(const Var& v);
Var softplus(const Var& v);
Var exp_op(const Var& v);
Var log_op(const Var& v);
Var pow_scalar(const Var& v, const Var& p);    // elementwise v^p, p: 1-element, v >= 0
Var softmax(const Var& v);                     // over all elements, flattened
Var log_softmax(const Var& v);
Var concat(const Var& a, const Var& b);        // flattened 1D concat
Var slice(const Var& v, int offset, int len);  // flattened 1D slice
Var sum(const Var& v);                         // -> {1}
Var cosine_sim(const Var& u, const Var& v);    // -> {1}, denominator guard 1e-8
Var normalize_sum(const Var& v, real eps);     // v / (sum(v) + eps)
Var lerp(const Var& a, const Var& b, const Var& g);  // g*a + (1-g)*b, g: 1-element

enum class ConvBoundary { Circular, Zero };
// 2D convolution of {H,W} field with {3,3} kernel of offsets in {-1,0,1}^2.
Var conv3x3(const Var& field, const Var& kernel, ConvBoundary boundary = ConvBoundary::Circular);

// Per-slot cosine similarity between key {C} and memory {H,W,C} -> {H,W}.
Var content_scores(const Var& memory, const Var& key);
// M'(x,y,c) = M(x,y,c) * (1 - w(x,y) e(c)) + w(x,y) a(c)
Var memory_write(const Var& memory, const Var& w, const Var& erase, const Var& addv);
// r(c) = sum_xy w(x,y) M(x,y,c)
Var memory_read(const Var& memory, const Var& w);

}  // namespace nslam::ad
