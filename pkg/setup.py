from setuptools import setup

setup(
    name="ddec",
    version="0.1.0",
    description="Simulation, measure algebra and controllability analysis for difference delay equations",
    py_modules=[
        "ddec",
        "delay_system",
        "errors",
        "freq_analysis",
        "fundamental",
        "measure_algebra",
        "simulator",
        "synthesis",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.10",
        "pandas>=1.5",
        "python-dotenv>=1.0",
    ],
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["ddec = ddec:main"]},
)
