#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace filmseg {

using Shape = std::vector<int>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first needed
    bool requires_grad = false;
};

/// Dense row-major f32 tensor. Feature maps use axis order N x C x D x H x W.
/// Copying a Tensor shares storage; clone() deep-copies.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int ndim() const { return static_cast<int>(p_->shape.size()); }
    int dim(int axis) const { return p_->shape[static_cast<size_t>(axis)]; }
    size_t numel() const { return p_->value.size(); }

    std::span<float> value() { return p_->value; }
    std::span<const float> value() const { return p_->value; }
    float item() const;  // value of a one-element tensor

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        p_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !p_->grad.empty(); }
    void ensure_grad();  // allocates a zero-filled grad buffer if absent
    std::span<float> grad();
    std::span<const float> grad() const;
    void zero_grad();

    Tensor clone() const;

    /// Storage identity; two handles compare equal iff they share storage.
    const TensorData* id() const { return p_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorData> p) : p_(std::move(p)) {}
    std::shared_ptr<TensorData> p_;
};

/// Recorded reverse-mode tape. Ops append nodes in execution order, so the
/// list is topologically sorted by construction; backward() visits each node
/// exactly once in reverse. One tape per forward pass; never shared across
/// threads.
class Tape {
  public:
    void record(const char* op, const Tensor& output, std::function<void()> backward_fn);
    bool produced(const Tensor& t) const { return produced_.count(t.id()) != 0; }
    size_t size() const { return nodes_.size(); }
    void clear();

  private:
    friend void backward(Tape&, const Tensor&);
    struct Node {
        const char* op;
        Tensor output;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;
    std::unordered_set<const TensorData*> produced_;
};

/// Accumulates d(loss)/dp into the grad of every requires_grad tensor
/// reachable from the tape. loss must be a one-element tensor produced by a
/// recorded op. Grads are accumulated, not overwritten: a tensor consumed
/// twice receives the sum of both contributions.
void backward(Tape& tape, const Tensor& loss);

struct Conv3dSpec {
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> padding{0, 0, 0};
};

/// Direct cross-correlation with zero padding.
/// input [N,Cin,D,H,W], weight [Cout,Cin,kD,kH,kW], bias [Cout].
/// Output spatial size (X + 2p - k)/s + 1 must be a positive integer.
Tensor conv3d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv3dSpec& spec = {});

/// Gradient-of-conv upsampling; output spatial size (X-1)*s + k.
/// input [N,Cin,D,H,W], weight [Cin,Cout,kD,kH,kW], bias [Cout].
Tensor transposed_conv3d(Tape* tape, const Tensor& input, const Tensor& weight,
                         const Tensor& bias, const std::array<int, 3>& stride);

/// Per-(sample,channel) standardization over D,H,W followed by a learned
/// affine. gain/shift are per-channel [C]. epsilon keeps zero-variance
/// channels finite.
Tensor instance_norm(Tape* tape, const Tensor& input, const Tensor& gain, const Tensor& shift,
                     float epsilon = 1e-5f);

/// x if x >= 0 else slope*x. The subgradient at exactly 0 is 1.
Tensor leaky_relu(Tape* tape, const Tensor& input, float slope = 0.01f);

/// Per-voxel softmax over the channel axis, max-subtracted for stability.
Tensor softmax_channel(Tape* tape, const Tensor& input);

/// Concatenate along the channel axis; all other dims must match.
Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b);

/// y = W x + b for a rank-1 x: x [in], weight [out,in], bias [out].
Tensor linear(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor reduce_sum(Tape* tape, const Tensor& x);

/// y = s * x elementwise; s is a fixed coefficient, not a tensor.
Tensor scale(Tape* tape, const Tensor& x, float s);

/// Central finite differences (f(p+h) - f(p-h)) / (p+ - p-) for every scalar
/// of every listed parameter. f must evaluate the current parameter values.
std::vector<std::vector<float>> finite_difference_grad(const std::function<double()>& f,
                                                       std::span<Tensor> params, float h);

/// Single-coordinate central difference; restores the parameter afterwards.
double finite_difference_at(const std::function<double()>& f, Tensor& param, size_t index,
                            float h);

}  // namespace filmseg
