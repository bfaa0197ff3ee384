#pragma once

#include <stdexcept>
#include <string>

namespace adalink {

// Shape or width disagreement between operands.
class DimensionError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Token id outside the model vocabulary.
class VocabularyError : public std::runtime_error {
   public:
    VocabularyError(const std::string &what, long index) : std::runtime_error(what), index_(index) {}
    long index() const { return index_; }

   private:
    long index_;
};

class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Caller violated a documented precondition.
class ContractError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class RoutingError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace adalink
