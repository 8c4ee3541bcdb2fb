#pragma once

#include <stdexcept>
#include <string>

namespace pavecrack {

/// Base of every error raised by the toolkit. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class GeometryError : public Error { using Error::Error; };
class ProvenanceError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class UniquenessError : public Error { using Error::Error; };
class UndefinedBoostError : public Error { using Error::Error; };
class PersistenceError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

/// Raised when the training loss becomes NaN or infinite.
class DivergenceError : public Error {
public:
    DivergenceError(int epoch, const std::string& what)
        : Error(what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

}  // namespace pavecrack
