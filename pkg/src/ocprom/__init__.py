"""Reduced-order modeling for parametrized linear-quadratic optimal control problems.

Modules
-------
mesh        structured triangulations, plain-text mesh I/O
fem         P1 assembly, trilinear Jacobian form, Poincare/trace constants
quadrature  parameter distributions and quadrature rules
ocp         affine OCP definitions, truth KKT and Newton solves
cases       built-in gulf / stommel_munk / qg_nonlinear problems
wpod        weighted POD, partitioned compression, aggregation
rom         offline projection and online reduced solves
harness     study orchestration and CSV output
cli         command-line entry point
"""

__version__ = "0.1.0"
