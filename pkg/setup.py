from setuptools import setup, find_packages

setup(
    name="crashtype-bayes",
    version="0.1.0",
    description="Bayesian random-effect negative binomial models of approach-level crash types",
    packages=find_packages(where="src", exclude=["mytesting"]),  # Packages live in the 'src' folder
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.26",
        "scipy>=1.11",
        "pandas>=2.1",
        "pydantic>=2.9",
    ],
    extras_require={
        "dev": ["pytest>=8.0"],
    },
    entry_points={
        "console_scripts": [
            "crashtype-bayes=crashtype_bayes.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.11",  # tomllib
)
