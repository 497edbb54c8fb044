"""Build the optional compiled DTW kernel.

The package falls back to a numpy implementation when the extension is not
available, so a failed compile is reported and skipped rather than fatal.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled DTW kernel not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: building {ext.name} failed ({exc}); using numpy fallback")


try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("airglyph._dtw", ["src/airglyph/_dtw.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
