#include "candle/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace candle {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e < 0) fail(ErrorKind::Shape, "negative extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

Tensor::Tensor() : s_(std::make_shared<detail::Storage>()) {
    s_->data.assign(1, 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : s_(std::make_shared<detail::Storage>()) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        fail(ErrorKind::Shape, "buffer length " + std::to_string(data.size()) +
                                   " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
}

Tensor Tensor::zeros(const Shape& shape) {
    return Tensor(shape, std::vector<float>(static_cast<std::size_t>(shape_numel(shape)), 0.0f));
}

Tensor Tensor::full(const Shape& shape, float value) {
    return Tensor(shape, std::vector<float>(static_cast<std::size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

std::int64_t Tensor::dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) {
        fail(ErrorKind::Shape, "dimension index " + std::to_string(i) + " out of range for shape " +
                                   shape_str(shape()));
    }
    return s_->shape[static_cast<std::size_t>(i)];
}

float Tensor::item() const {
    if (numel() != 1) fail(ErrorKind::Shape, "item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
    if (static_cast<int>(index.size()) != rank()) {
        fail(ErrorKind::Shape, "index rank does not match tensor rank");
    }
    std::int64_t flat = 0;
    int d = 0;
    for (auto i : index) {
        const auto extent = s_->shape[static_cast<std::size_t>(d)];
        if (i < 0 || i >= extent) fail(ErrorKind::Shape, "index out of range in dimension " + std::to_string(d));
        flat = flat * extent + i;
        ++d;
    }
    return s_->data[static_cast<std::size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool value) {
    s_->requires_grad = value;
    return *this;
}

std::span<float> Tensor::grad() {
    s_->ensure_grad();
    return s_->grad;
}

Tensor Tensor::grad_tensor() const {
    if (!has_grad()) return Tensor::zeros(shape());
    return Tensor(shape(), s_->grad);
}

void Tensor::zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const { return Tensor(shape(), s_->data); }

bool Tensor::all_finite() const {
    for (float v : s_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        fail(ErrorKind::Shape, "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (nodes_.empty()) fail(ErrorKind::Value, "backward on an empty tape");

    for (auto& node : nodes_) {
        auto& g = node.output->grad;
        if (!g.empty()) std::fill(g.begin(), g.end(), 0.0f);
    }
    auto& root = *loss.storage();
    root.ensure_grad();
    root.grad[0] = 1.0f;

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // not reachable from the loss
        it->backward();
    }
}

void backward(const Tensor& loss) {
    Tape* tape = active_tape();
    if (tape == nullptr) fail(ErrorKind::Value, "backward called with no active tape");
    tape->backward(loss);
}

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

bool needs_grad(const std::vector<Tensor>& inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void record(const Tensor& output, std::vector<Tensor> inputs, std::function<void()> backward) {
    output.storage()->requires_grad = true;
    Tape::Node node;
    node.inputs.reserve(inputs.size());
    for (auto& t : inputs) node.inputs.push_back(t.storage());
    node.output = output.storage();
    node.backward = std::move(backward);
    g_active_tape->record(std::move(node));
}

}  // namespace detail
}  // namespace candle
