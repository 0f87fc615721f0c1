#pragma once

#include <stdexcept>
#include <string>

namespace fusion {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A parameter is outside its admissible range (tau, costs, config fields, ...).
struct InvalidParameterError : Error {
  using Error::Error;
};

// Vector/matrix dimensions do not agree.
struct ShapeError : Error {
  using Error::Error;
};

// Structurally invalid input (empty task, window out of range, ...).
struct InvalidInputError : Error {
  using Error::Error;
};

// An enumeration would exceed its configured budget.
struct BudgetError : Error {
  using Error::Error;
};

// A named column is missing or duplicated in a tabular input.
struct SchemaError : Error {
  SchemaError(const std::string& msg, std::string column_name)
      : Error(msg), column(std::move(column_name)) {}
  std::string column;
};

// A cell could not be parsed; `row` is the 1-based data row index.
struct ParseError : Error {
  ParseError(const std::string& msg, long row_index) : Error(msg), row(row_index) {}
  long row;
};

struct IoError : Error {
  using Error::Error;
};

// Base for iteration-budget failures; concrete solvers attach their best iterate.
struct ConvergenceError : Error {
  using Error::Error;
};

}  // namespace fusion
