import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FUNION_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "funion.mixnet._hopengine",
                ["src/funion/mixnet/_hopengine.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ]
        # no -ffast-math: hop timestamps must match the pure-Python engine bit for bit
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
