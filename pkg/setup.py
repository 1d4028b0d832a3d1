from setuptools import setup, find_packages

setup(
    name="rcbm_stokes",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy>=1.24.3",
        "scipy>=1.10.1",
        "pandas>=1.5.3",
        "pyyaml>=6.0.1",
        "tqdm>=4.66.1",
    ],
    extras_require={
        "test": ["pytest>=7.4.3", "pytest-cov>=4.1.0"],
    },
    python_requires=">=3.9",
)
