"""Build script: compiles the optional kernel extension.

The package is fully functional without it (numpy fallback selected at
import); a failed compile therefore only costs speed.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension(
            "inrreg.kernels._fast",
            ["src/inrreg/kernels/_fast.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3"],
        )],
        language_level=3,
    )
except Exception as e:  # pragma: no cover - degraded build path
    print(f"warning: building without compiled kernels ({e})")

setup(ext_modules=ext_modules)
