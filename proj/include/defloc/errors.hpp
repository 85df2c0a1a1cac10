#pragma once

#include <stdexcept>
#include <string>

namespace defloc {

// A caller broke an operation's precondition (bad dimensions, stepping a
// finished episode, TRIGGER passed to a box transform, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Filesystem or child-process failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file was readable but its contents are not what we expect.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged; carries where it happened.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, int epoch, long step)
      : std::runtime_error(what), epoch_(epoch), step_(step) {}
  int epoch() const { return epoch_; }
  long step() const { return step_; }

 private:
  int epoch_;
  long step_;
};

}  // namespace defloc
