"""Setup configuration for zest-nerf"""
from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="zest-nerf",
    version="0.1.0",
    author="Zest Team",
    description="Scene-agnostic neural radiance fields for dynamic novel view synthesis",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["zest", "zest.*", "config", "config.*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Image Processing",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.10",
    install_requires=requirements,
    entry_points={
        "console_scripts": [
            "zest=zest.cli:main",
        ],
    },
)
