#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace candle {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Error categories map onto CLI exit codes (usage=1, validation=2, io=3).
enum class ErrorKind { Shape, Value, NonFinite, Config, Io, Usage };

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

namespace detail {
struct Storage {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // lazily sized to data.size()
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};
}  // namespace detail

/// Dense row-major f32 array. Copies share storage; use clone() for a deep copy.
class Tensor {
   public:
    Tensor();
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, float value);
    static Tensor scalar(float value);

    const Shape& shape() const { return s_->shape; }
    std::int64_t dim(int i) const;
    int rank() const { return static_cast<int>(s_->shape.size()); }
    std::size_t numel() const { return s_->data.size(); }

    std::span<const float> data() const { return s_->data; }
    std::span<float> mutable_data() { return s_->data; }
    const float* ptr() const { return s_->data.data(); }
    float* mutable_ptr() { return s_->data.data(); }
    float item() const;

    float at(std::initializer_list<std::int64_t> index) const;

    bool requires_grad() const { return s_->requires_grad; }
    Tensor& set_requires_grad(bool value);

    bool has_grad() const { return !s_->grad.empty(); }
    // Returns the gradient buffer, allocating zeros on first access.
    std::span<float> grad();
    Tensor grad_tensor() const;
    void zero_grad();

    Tensor clone() const;
    Tensor detach() const { return clone(); }
    bool same_storage(const Tensor& other) const { return s_ == other.s_; }
    bool all_finite() const;

    const std::shared_ptr<detail::Storage>& storage() const { return s_; }

   private:
    std::shared_ptr<detail::Storage> s_;
};

/// Ordered record of differentiable ops executed while it is the active tape.
class Tape {
   public:
    struct Node {
        std::vector<std::shared_ptr<detail::Storage>> inputs;
        std::shared_ptr<detail::Storage> output;
        std::function<void()> backward;
    };

    void record(Node node) { nodes_.push_back(std::move(node)); }
    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    // Seeds d(loss)=1 and replays the recorded ops in reverse. Leaf gradients
    // accumulate across calls; intermediate gradients are reset each call.
    void backward(const Tensor& loss);

   private:
    std::vector<Node> nodes_;
};

/// Makes a tape the thread's active tape for the lifetime of the scope.
class TapeScope {
   public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    Tape* previous_;
};

Tape* active_tape();

// Backward through the thread's active tape.
void backward(const Tensor& loss);

namespace detail {
// True when an op with these inputs must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
bool needs_grad(const std::vector<Tensor>& inputs);
void record(const Tensor& output, std::vector<Tensor> inputs, std::function<void()> backward);
}  // namespace detail

}  // namespace candle
