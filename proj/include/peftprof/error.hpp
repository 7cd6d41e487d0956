#ifndef PEFTPROF_ERROR_HPP
#define PEFTPROF_ERROR_HPP

#include <stdexcept>
#include <string>

namespace peftprof {

/// Base class for every error raised by the library. The category maps onto
/// the CLI exit codes (usage = 1, validation = 2).
class Error : public std::runtime_error {
public:
    enum class Category { usage, validation };

    Error(Category category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }

private:
    Category category_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(Category::validation, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(Category::usage, what) {}
};

/// Shape inference failure; carries the offending node id.
class ShapeError : public ValidationError {
public:
    ShapeError(std::string node_id, const std::string& what)
        : ValidationError("node '" + node_id + "': " + what), node_id_(std::move(node_id)) {}

    const std::string& node_id() const noexcept { return node_id_; }

private:
    std::string node_id_;
};

}  // namespace peftprof

#endif  // PEFTPROF_ERROR_HPP
