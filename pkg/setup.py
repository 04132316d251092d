import setuptools
with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name='dynpred',
    version='0.1.0',
    include_package_data=True,
    packages=setuptools.find_packages(exclude=['tests', 'examples', 'examples.*']),
    description="Landmark dynamic prediction of clinical events from repeated markers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.7',
    install_requires=[
        'Click',
        'colorama',
        'humanfriendly',
        'joblib',
        'lifelines',
        'numpy',
        'pandas',
        'python-dotenv',
        'scikit-learn',
        'scipy',
        'tqdm',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points='''
        [console_scripts]
        dynpred=dynpred.cli:cli
    ''',
)
