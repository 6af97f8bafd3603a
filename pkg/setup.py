"""Setup script for the desk3d package."""
import os

from setuptools import find_packages, setup

# Read the contents of README file
this_directory = os.path.abspath(os.path.dirname(__file__))
with open(os.path.join(this_directory, "README.md"), encoding="utf-8") as f:
    long_description = f.read()

setup(
    name="desk3d",
    version="0.1.0",
    description=(
        "Desk-scale text-to-3D and image-to-3D asset generation: multi-view diffusion, "
        "triplane SDF reconstruction and quad-mesh export"
    ),
    long_description=long_description,
    long_description_content_type="text/markdown",
    author="desk3d developers",
    packages=find_packages(exclude=["test*", "docs*", "examples*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Developers",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Multimedia :: Graphics :: 3D Modeling",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    keywords="3d diffusion triplane sdf marching-cubes uv obj",
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "scikit-image>=0.19",
        "Pillow>=9.0",
        "matplotlib>=3.5",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-mock>=3.10.0",
            "pytest-cov>=4.0.0",
            "black>=22.0.0",
            "isort>=5.10.0",
            "flake8>=4.0.0",
            "mypy>=0.950",
            "tox>=4.0.0",
        ],
        "docs": [
            "sphinx>=4.0.0",
            "sphinx-rtd-theme>=1.0.0",
            "myst-parser>=0.18.0",
        ],
    },
    entry_points={
        "console_scripts": ["desk3d=desk3d.cli:main"],
    },
    package_data={
        "desk3d": ["py.typed"],
    },
    zip_safe=False,
)
