"""Build the optional compiled event-loop kernel.

The package works without the extension (a pure-Python kernel is selected at
import time), so a failed cythonize/compile only costs speed, not correctness.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "spotpipe.engine._kernel",
                ["src/spotpipe/engine/_kernel.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
