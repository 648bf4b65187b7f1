#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medcorpus {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a documented invariant (bad config, invalid record, ...).
/// The CLI maps this to exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed line in a JSONL file.
class ParseError : public ValidationError {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : ValidationError(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Text has fewer units than the shingle width.
class TooFewShingles : public Error {
public:
    using Error::Error;
};

/// A record is missing a section required by its task template.
class IncompleteRecord : public Error {
public:
    using Error::Error;
};

/// CT study without a usable 5.0 mm series.
class SeriesSelectionError : public Error {
public:
    using Error::Error;
};

/// Judge output without a parseable 0..5 score.
class UnscorableOutput : public Error {
public:
    using Error::Error;
};

/// A pipeline stage failed; carries the stage name. CLI exit code 3.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace medcorpus
