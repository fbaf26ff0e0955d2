#!/usr/bin/python
from setuptools import setup, find_packages


setup(
    name='reasonbench',
    version='1.0.1',
    packages=find_packages(exclude=['contrib', 'docs', 'build', 'dist']),
    package_data={
        'reasonbench': ['reasonbench.conf', 'pytest.ini', 'fixtures/*/*.jsonl'],
    },

    author='sine',
    author_email='sinecelia.wang@gmail.com',
    maintainer='sine.wang',
    maintainer_email='sinecelia.wang@gmail.com',
    description='Run, score and compare LLM reasoning workflows',
    license='MIT',
    keywords='llm reasoning benchmark debate pytest',

    python_requires='>=3.8',
    install_requires=[
        'backoff >=2.0.0',
        'munch >=2.0.0',
        'isodate >=0.4.4',
        'pytz >=2022.1',
        'requests >= 2.22.0',
    ],
    extras_require={
        'test': [
            'py >= 1.11.0',
            'pytest >= 7.1.1',
            'pytest-html >= 3.1.1',
            'pytest-rerunfailures >= 10.2',
            'pytest-xdist >= 2.5.0',
        ],
    },
    entry_points={
        'console_scripts': ['reasonbench=reasonbench.main:main'],
    },

    classifiers=[
        #   3 - Alpha
        #   4 - Beta
        #   5 - Production/Stable
        'Development Status :: 4 - Beta',
        'Framework :: Pytest',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3 :: Only',
        'Programming Language :: Python :: Implementation :: CPython',
        'Operating System :: POSIX',
        'License :: OSI Approved :: MIT License',
    ],
)
