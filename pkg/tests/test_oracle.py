"""Oracle self-checks: independence and size guards."""

import ast
import inspect

import numpy as np
import pytest

from ifmatch import oracle


class TestIndependence:
    def test_no_production_imports(self):
        """The oracle module must not call into production modules."""
        src = inspect.getsource(oracle)
        tree = ast.parse(src)
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                names = [a.name for a in node.names]
                assert names == ["numpy"] or names == ["np"], names
            elif isinstance(node, ast.ImportFrom):
                raise AssertionError(f"oracle imports from {node.module}")


class TestGuards:
    def test_conv_guard(self):
        x = np.zeros((8, 8, 32, 32)) + 1.0
        w = np.ones((1, 8, 3, 3))
        with pytest.raises(oracle.OracleSizeError):
            oracle.conv2d_reference(x, w)

    def test_translate_guard(self):
        with pytest.raises(oracle.OracleSizeError):
            oracle.translate_reference(np.ones((4, 9, 16, 16)), "up", 1)

    def test_fd_guard(self):
        with pytest.raises(oracle.OracleSizeError):
            oracle.finite_difference_grad(lambda a: 0.0, np.ones((64, 64, 4)))

    def test_empty_otsu_rejected(self):
        with pytest.raises(ValueError):
            oracle.otsu_reference([])


class TestOtsuReference:
    def test_bimodal_threshold_between_modes(self):
        values = np.array([0.1] * 30 + [2.0] * 30)
        t = oracle.otsu_reference(values)
        assert 0.1 < t < 2.0

    def test_degenerate_returns_inf(self):
        assert oracle.otsu_reference([1.0] * 10) == float("inf")
