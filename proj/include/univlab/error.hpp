#pragma once

#include <stdexcept>
#include <string>

namespace univlab {

enum class ErrorKind {
  shape,         // dimension / length mismatch
  value,         // non-finite or out-of-domain numeric input
  config,        // invalid configuration or parameter combination
  io,            // filesystem / stream failure
  checksum,      // stored checksum does not match payload
  architecture,  // file or site belongs to a different architecture
  contract,      // violated pre/post-condition between pipeline stages
  service,       // external service (LLM endpoint) failure
  usage,         // bad command-line usage
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit code for an error kind: 1 usage, 2 data/contract, 3 external service.
int exit_code_for(ErrorKind kind);

}  // namespace univlab

#define UNIV_CHECK(cond, kind, msg)                                     \
  do {                                                                  \
    if (!(cond)) throw ::univlab::Error(::univlab::ErrorKind::kind, msg); \
  } while (0)
