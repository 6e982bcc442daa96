// sslmtpp/tensor.hpp: dense row-major float64 tensor.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace sslmtpp {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input/usage errors (bad flags, invalid config). The CLI maps these to
// exit code 2; plain Error maps to 1.
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> vals) : shape(std::move(s)), v(std::move(vals)) {
        if (static_cast<long>(v.size()) != numel_of(shape))
            throw Error("tensor value count " + std::to_string(v.size()) +
                        " does not match shape " + shape_str(shape));
    }

    static long numel_of(const Shape& s);
    static Tensor zeros(Shape s) { return Tensor(std::move(s), {}, 0.0); }
    static Tensor full(Shape s, double x) { return Tensor(std::move(s), {}, x); }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    long numel() const { return static_cast<long>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    // Rows/cols view of the trailing dimension: an [a x b x c] tensor is
    // (a*b) rows of length c. Scalars and vectors are one row.
    int row_len() const { return shape.empty() ? 1 : shape.back(); }
    long row_count() const { return row_len() == 0 ? 0 : numel() / row_len(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& at(long i) { return v[i]; }
    double at(long i) const { return v[i]; }

private:
    Tensor(Shape s, std::vector<double>, double fill) : shape(std::move(s)) {
        v.assign(numel_of(shape), fill);
    }
};

bool all_finite(const Tensor& t);

}  // namespace sslmtpp
