#pragma once

#include <stdexcept>
#include <string>

namespace abstain {

/// Coarse category used by the CLI to pick an exit code.
enum class ErrorClass { config, data, training, internal };

/// Base of every error thrown by the library. `kind()` is the stable,
/// machine-readable name (e.g. "DegenerateNorm") surfaced in error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what, ErrorClass cls)
        : std::runtime_error(what), kind_(std::move(kind)), cls_(cls) {}

    [[nodiscard]] const std::string& kind() const noexcept { return kind_; }
    [[nodiscard]] ErrorClass error_class() const noexcept { return cls_; }

private:
    std::string kind_;
    ErrorClass cls_;
};

#define ABSTAIN_DEFINE_ERROR(Name, Class)                                   \
    class Name : public Error {                                             \
    public:                                                                 \
        explicit Name(const std::string& what)                              \
            : Error(#Name, what, ErrorClass::Class) {}                      \
    };

// numeric kernel
ABSTAIN_DEFINE_ERROR(DegenerateNorm, data)
ABSTAIN_DEFINE_ERROR(NonPositiveTemperature, config)
ABSTAIN_DEFINE_ERROR(EmptyMask, data)
ABSTAIN_DEFINE_ERROR(ShapeMismatch, data)

// corpus / pairing
ABSTAIN_DEFINE_ERROR(FormatError, data)
ABSTAIN_DEFINE_ERROR(NormError, data)
ABSTAIN_DEFINE_ERROR(DuplicateId, data)
ABSTAIN_DEFINE_ERROR(InfeasibleGeometry, config)
ABSTAIN_DEFINE_ERROR(EmptySplit, config)
ABSTAIN_DEFINE_ERROR(MissingHardNegative, data)
ABSTAIN_DEFINE_ERROR(EmptyOODPool, data)

// training
ABSTAIN_DEFINE_ERROR(NonFiniteGradient, training)
ABSTAIN_DEFINE_ERROR(DivergedLoss, training)

// evaluation / scoring
ABSTAIN_DEFINE_ERROR(SingleClass, data)
ABSTAIN_DEFINE_ERROR(IndexTooSmall, data)
ABSTAIN_DEFINE_ERROR(DimensionMismatch, data)
ABSTAIN_DEFINE_ERROR(ConfigHashMismatch, config)
ABSTAIN_DEFINE_ERROR(ConfigError, config)

#undef ABSTAIN_DEFINE_ERROR

}  // namespace abstain
