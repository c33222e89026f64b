from setuptools import setup, find_packages

setup(
    name="softsplat-sim",
    version="0.1.0",
    description="Desk-scale real-to-sim soft-body simulator with hierarchical Gaussian splats",
    author="SoftSplat Sim Team",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["config", "main"],
    install_requires=[
        "torch>=2.1",
        "numpy>=1.24",
        "scipy>=1.10",
        "scikit-learn>=1.3",
        "opencv-python-headless>=4.8",
        "pydantic>=2.5",
        "python-dotenv>=1.0",
    ],
    extras_require={
        "dev": ["pytest>=7.0"],
    },
    entry_points={
        'console_scripts': [
            'softsplat=softsplat_cli.entry:main',
        ],
    },
    python_requires='>=3.9',
)
