"""
Hybridizable discontinuous Galerkin kernel on triangle meshes with an audit
of the discrete Poincare and trace inequalities behind its stability.
"""
__version__ = "0.1.0"
