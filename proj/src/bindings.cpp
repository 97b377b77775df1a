#include <pybind11/pybind11.h>
PYBIND11_MODULE(_deop, m) { m.doc() = "deop"; }
