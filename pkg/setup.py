#!/usr/bin/env python3
"""
distill-lab Setup Script

Installs the distill-lab package and its command line.
"""

from pathlib import Path

try:
    from setuptools import setup, find_packages
except ImportError as exc:
    raise ImportError(
        "setuptools is required to install distill-lab. "
        "Please install it with: pip install setuptools"
    ) from exc

# Read the README
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text()

# Core dependencies
install_requires = [
    "numpy>=1.20",
    "psutil>=5.8.0",
    "tqdm>=4.62.0",
]

setup(
    name="distill-lab",
    version="0.1.0",
    description="Progressive knowledge distillation experiments on dense networks",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={"distill_lab": ["presets/*.json"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.8",
    install_requires=install_requires,
    extras_require={
        "dev": [
            "pytest>=6.0",
            "hypothesis>=6.0",
            "black>=21.0",
            "flake8>=3.9",
            "mypy>=0.900",
        ],
    },
    entry_points={
        "console_scripts": [
            "distill-lab=distill_lab.cli:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
)
