from setuptools import setup, find_packages


def main():
    packages = find_packages(exclude=["tests", "examples*"])
    print("Installing `josa-sphere` packages:\n", "\n".join(packages))
    extras_require = {"test": ["pytest", "jinja2"]}
    extras_require["all"] = list(
        {dep for deps in extras_require.values() for dep in deps}
    )
    setup(
        name="josa_sphere",
        version="0.1.0",
        description="Joint spherical registration and atlas estimation",
        long_description="Diffeomorphic registration of geometric and functional "
        "feature maps on the sphere with an unbiased atlas learned jointly.",
        packages=packages,
        py_modules=["cli"],
        include_package_data=True,
        install_requires=["numpy", "scipy", "click", "ruamel.yaml"],
        extras_require=extras_require,
        entry_points="""
          [console_scripts]
          josa=cli:josa
          """,
    )


if __name__ == "__main__":
    main()
