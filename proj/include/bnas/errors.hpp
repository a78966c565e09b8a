// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_ERRORS_HPP
#define BNAS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace bnas {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define BNAS_DEFINE_ERROR(Name)             \
    class Name : public Error {             \
    public:                                 \
        using Error::Error;                 \
    }

// graph_ir
BNAS_DEFINE_ERROR(GraphError);
BNAS_DEFINE_ERROR(CycleDetected);

class ShapeMismatch : public Error {
public:
    ShapeMismatch(std::string node, std::string expected, std::string actual)
        : Error("shape mismatch at '" + node + "': expected " + expected + ", got " + actual),
          node_(std::move(node)), expected_(std::move(expected)), actual_(std::move(actual)) {}

    const std::string& node() const noexcept { return node_; }
    const std::string& expected() const noexcept { return expected_; }
    const std::string& actual() const noexcept { return actual_; }

private:
    std::string node_, expected_, actual_;
};

// model_io
BNAS_DEFINE_ERROR(ParseError);
BNAS_DEFINE_ERROR(WeightIndexOutOfBounds);
BNAS_DEFINE_ERROR(ChecksumMismatch);
BNAS_DEFINE_ERROR(IoError);
BNAS_DEFINE_ERROR(BadMagic);
BNAS_DEFINE_ERROR(DimensionMismatch);
BNAS_DEFINE_ERROR(ConfigError);

// elasticity
BNAS_DEFINE_ERROR(ConflictingConstraint);
BNAS_DEFINE_ERROR(EmptySpace);
BNAS_DEFINE_ERROR(InvalidChoice);

class FidelityCheckFailed : public Error {
public:
    explicit FidelityCheckFailed(double max_abs_diff)
        : Error("fidelity check failed: max |diff| = " + std::to_string(max_abs_diff)),
          max_abs_diff_(max_abs_diff) {}
    double max_abs_diff() const noexcept { return max_abs_diff_; }

private:
    double max_abs_diff_;
};

// engine
BNAS_DEFINE_ERROR(NonFiniteActivation);
BNAS_DEFINE_ERROR(NonFiniteGradient);

#undef BNAS_DEFINE_ERROR

} // namespace bnas

#endif // BNAS_ERRORS_HPP
