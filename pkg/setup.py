from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the pure-Python path still works without the kernel
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "toriqp._kernels",
                ["src/toriqp/_kernels.pyx"],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
