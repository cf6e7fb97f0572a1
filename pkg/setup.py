"""
    Setup file for sacfl.

    Metadata and dependencies live in setup.cfg, this file only hooks in
    setuptools_scm so the version follows the git tags.
"""
from setuptools import setup

if __name__ == "__main__":
    try:
        setup(use_scm_version={"version_scheme": "no-guess-dev"})
    except:  # noqa
        print(
            "\n\nThe sacfl package could not be built. Make sure setuptools, "
            "setuptools_scm and wheel are recent:\n"
            "   pip install -U setuptools setuptools_scm wheel\n\n"
        )
        raise
