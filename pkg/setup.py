from setuptools import setup, find_packages

setup(
    name="dign_robustness",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "examples*"]),
    install_requires=[
        "numpy",
        "scipy",
        "pandas",
        "PyYAML==6.0.3",
        "rich",
    ],
    python_requires=">=3.9",
    entry_points={
        "console_scripts": [
            "dign=src.cli:main",
        ],
    },
)
